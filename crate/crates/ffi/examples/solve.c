#include <stdio.h>

#include "switchgame.h"

static int fail(const char *what, SgStatus s) {
    fprintf(stderr, "%s failed (%d): %s\n", what, (int)s, sg_last_error());
    return 1;
}

int main(int argc, char **argv) {
    if (argc != 2) {
        fprintf(stderr, "usage: %s CONFIG.toml\n", argv[0]);
        return 2;
    }
    SgProblem *problem = NULL;
    SgStatus s = sg_problem_load(argv[1], &problem);
    if (s != SG_STATUS_OK) return fail("load", s);

    size_t modes = 0;
    sg_problem_modes(problem, &modes);
    printf("switchgame %s, modes %zu\n", sg_version(), modes);

    SgField *field = NULL;
    s = sg_solve(problem, SG_ROUTE_PDE_MINMAX, &field);
    if (s != SG_STATUS_OK) {
        sg_problem_free(problem);
        return fail("solve", s);
    }
    for (size_t i = 0; i < modes; i++) {
        double v = 0.0;
        sg_field_interp(field, i, 0.0, 0.0, &v);
        printf("v%zu(0,0) = %.6f\n", i + 1, v);
    }
    sg_field_free(field);
    sg_problem_free(problem);
    return 0;
}
