#include <math.h>
#include <stdio.h>
#include <string.h>

#include "sparsepanel.h"

#define CHECK(cond)                                                   \
    do {                                                              \
        if (!(cond)) {                                                \
            fprintf(stderr, "%s:%d: %s (%s)\n", __FILE__, __LINE__, \
                    #cond, sp_last_error_message());                  \
            return 1;                                                 \
        }                                                             \
    } while (0)

int main(void) {
    CHECK(strlen(sp_version()) > 0);

    double values[6] = {1.0, NAN, 3.0, 4.0, 5.0, NAN};
    SpPanel *panel = NULL;
    CHECK(sp_panel_from_values(values, 2, 3, 2000, &panel) == SP_STATUS_OK);
    CHECK(sp_panel_rows(panel) == 2 && sp_panel_cols(panel) == 3);
    CHECK(sp_panel_observed_count(panel) == 4);

    SpPanel *filled = NULL;
    CHECK(sp_impute(panel, SP_IMPUTE_METHOD_INTERP, 0, &filled) == SP_STATUS_OK);
    double out[6];
    CHECK(sp_panel_copy_values(filled, out, 6) == SP_STATUS_OK);
    CHECK(fabs(out[1] - 2.0) < 1e-12);
    CHECK(fabs(out[5] - 5.0) < 1e-12);

    /* errors come back as codes with a message, never as crashes */
    CHECK(sp_panel_copy_values(filled, out, 5) == SP_STATUS_INVALID_ARGUMENT);
    CHECK(strlen(sp_last_error_message()) > 0);
    CHECK(sp_impute(NULL, SP_IMPUTE_METHOD_MEAN, 0, &filled) == SP_STATUS_NULL_POINTER);

    SpPanel *y = NULL, *x = NULL;
    CHECK(sp_simulate_hierarchical(10, 8, 3, &y, &x) == SP_STATUS_OK);
    const SpPanel *covs[1] = {x};
    SpPosterior *post = NULL;
    CHECK(sp_bhm_fit(y, covs, 1, SP_BHM_METHOD_VI, 3, &post) == SP_STATUS_OK);
    CHECK(sp_posterior_len(post) > 2);
    CHECK(strcmp(sp_posterior_name(post, 1), "beta1") == 0);
    SpParamSummary s;
    CHECK(sp_posterior_get(post, 1, &s) == SP_STATUS_OK);
    CHECK(s.sd > 0.0 && s.q05 < s.mean && s.mean < s.q95);
    CHECK(isnan(s.rhat));

    sp_posterior_free(post);
    sp_panel_free(x);
    sp_panel_free(y);
    sp_panel_free(filled);
    sp_panel_free(panel);
    sp_panel_free(NULL);
    printf("ok\n");
    return 0;
}
