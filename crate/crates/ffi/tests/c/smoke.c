#include <math.h>
#include <stdio.h>

#include "aequiv.h"

#define CHECK(cond)                                              \
    do {                                                         \
        if (!(cond)) {                                           \
            fprintf(stderr, "%s:%d: %s\n", __FILE__, __LINE__, #cond); \
            return 1;                                            \
        }                                                        \
    } while (0)

int main(void) {
    double f1 = -1.0;
    CHECK(aequiv_token_f1("rain", "infrequent rain", AEQUIV_PROFILE_SIMPLE, &f1) == AEQUIV_STATUS_OK);
    CHECK(fabs(f1 - 2.0 / 3.0) < 1e-12);

    CHECK(aequiv_token_f1(NULL, "x", AEQUIV_PROFILE_SIMPLE, &f1) == AEQUIV_STATUS_NULL_POINTER);
    CHECK(aequiv_last_error() != NULL);

    double cal[] = {-0.5};
    AequivCalibrationModel *model = NULL;
    CHECK(aequiv_calibration_model_new(cal, 1, 1.0, &model) == AEQUIV_STATUS_OK);
    double scores[] = {0.7, 0.3};
    uint8_t included[2] = {9, 9};
    CHECK(aequiv_predict_set(model, scores, 2, 0.5, included) == AEQUIV_STATUS_OK);
    CHECK(included[0] == 1 && included[1] == 0);
    aequiv_calibration_model_free(model);

    double ub = 0.0;
    CHECK(aequiv_clopper_pearson_upper(0, 10, 0.01, &ub) == AEQUIV_STATUS_OK);
    CHECK(fabs(ub - (1.0 - pow(0.01, 0.1))) < 1e-10);

    puts("ok");
    return 0;
}
