#include <math.h>
#include <stdio.h>
#include "conic_tomo.h"

int main(void) {
    CtMetric *m = NULL;
    if (ct_metric_new_cone(0.5, CT_LINK_TORUS, &m) != CT_STATUS_OK) return 1;
    double s = 0.0;
    if (ct_sigma_laplacian_scalar(CT_REGIME_ONE_CUSP, 0.05, 1.0, 2.0, 0.0, 3.0, &s) != CT_STATUS_OK) return 2;
    if (fabs(s - 14.0) > 1e-12) return 3;
    double err = 1.0;
    if (ct_cone_comparison(m, 5, 1, 1e-11, &err) != CT_STATUS_OK || !(err < 1e-6)) return 4;
    CtMetric *bad = NULL;
    if (ct_metric_new_cone(2.0, CT_LINK_SPHERE, &bad) != CT_STATUS_INVALID_ARGUMENT || bad != NULL) return 5;
    if (ct_last_error()[0] == '\0') return 6;
    ct_metric_free(m);
    printf("ok %s\n", ct_version());
    return 0;
}
