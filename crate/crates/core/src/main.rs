fn main() {
    std::process::exit(switchgame::cli::run(std::env::args_os()));
}
