#include <stdio.h>
#include <string.h>
#include "lmf.h"

#define CHECK(cond) do { if (!(cond)) { fprintf(stderr, "line %d: %s\n", __LINE__, lmf_last_error_message()); return 1; } } while (0)

int main(int argc, char **argv) {
    if (argc < 2) return 2;
    uint64_t macs = 0;
    CHECK(lmf_macs(LMF_DIMS_PRESET_LM_LIIF, 1, 1, 1.0, &macs) == LMF_STATUS_OK);
    CHECK(macs == 163488u + 6592u);

    LmfModel *model = NULL;
    CHECK(lmf_model_load(argv[1], &model) == LMF_STATUS_OK);
    double px[4 * 4 * 3];
    for (int i = 0; i < 48; i++) px[i] = (i % 7) / 7.0;
    LmfImage *img = NULL, *sr = NULL;
    CHECK(lmf_image_new(4, 4, 3, px, &img) == LMF_STATUS_OK);
    CHECK(lmf_upsample(model, img, 2.5, &sr, &macs) == LMF_STATUS_OK);
    size_t h = 0, w = 0, c = 0;
    CHECK(lmf_image_dims(sr, &h, &w, &c) == LMF_STATUS_OK);
    CHECK(h == 10 && w == 10 && c == 3 && macs > 0);
    CHECK(lmf_image_data(sr) != NULL);

    CHECK(lmf_model_load("/nonexistent/model.lmf", &model) == LMF_STATUS_IO);
    CHECK(strlen(lmf_last_error_message()) > 0);
    CHECK(lmf_upsample(NULL, img, 2.0, &sr, NULL) == LMF_STATUS_NULL_POINTER);

    lmf_image_free(sr);
    lmf_image_free(img);
    lmf_model_free(model);
    lmf_model_free(NULL);
    printf("ok\n");
    return 0;
}
