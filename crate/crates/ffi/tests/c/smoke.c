#include <math.h>
#include <stdio.h>
#include "nested_is.h"

int main(void) {
    NisModel *m = NULL;
    if (nis_model_s1(&m) != NIS_STATUS_OK) return 1;
    double y = 1.0, logz = 0.0;
    if (nis_log_marginal_likelihood(m, &y, 1, &logz) != NIS_STATUS_OK) return 2;
    if (!isfinite(logz)) return 3;

    NisParticles *p = NULL;
    if (nis_sample(m, &y, 1, 7, 64, 4, &p) != NIS_STATUS_OK) return 4;
    size_t len = 0, d_x = 0;
    nis_particles_shape(p, &len, &d_x);
    if (len != 64 || d_x != 1) return 5;
    double w[64], total = 0.0;
    if (nis_particles_weights(p, w, 64) != NIS_STATUS_OK) return 6;
    for (size_t i = 0; i < len; i++) total += w[i];
    if (fabs(total - 1.0) > 1e-12) return 7;
    if (nis_particles_weights(p, w, 3) != NIS_STATUS_BUFFER_TOO_SMALL) return 8;
    char msg[256];
    if (nis_last_error_message(msg, sizeof msg) == 0) return 9;
    nis_particles_free(p);
    nis_model_free(m);
    printf("ok %s\n", nis_version());
    return 0;
}
