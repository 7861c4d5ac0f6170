#include <math.h>
#include <stdio.h>
#include "triattn.h"

int main(void) {
    TriattnParams *p = NULL;
    if (triattn_params_new(TRIATTN_VARIANT_TDP, TRIATTN_INTEGRATION_MUL, 3, 1, &p) != TRIATTN_STATUS_OK) {
        fprintf(stderr, "params_new: %s\n", triattn_last_error());
        return 1;
    }
    double q[3] = {1.0, 0.0, -1.0};
    double k[6] = {0.5, 1.0, 0.0, 1.0, -0.5, 0.5};
    double c[6] = {1.0, 1.0, 1.0, 0.5, -1.0, 2.0};
    double w[4];
    double e[3];
    if (triattn_tri_weights(p, q, k, 2, c, 2, w) != TRIATTN_STATUS_OK) return 2;
    if (triattn_tri_attend(p, q, k, k, 2, c, 2, e) != TRIATTN_STATUS_OK) return 3;
    double s = w[0] + w[1] + w[2] + w[3];
    if (fabs(s - 1.0) > 1e-12) return 4;
    if (triattn_tri_attend(p, NULL, k, k, 2, c, 2, e) != TRIATTN_STATUS_NULL_POINTER) return 5;
    if (triattn_last_error() == NULL) return 6;
    triattn_params_free(p);
    printf("sum=%.12f e0=%.6f\n", s, e[0]);
    return 0;
}
