#include <math.h>
#include <stdio.h>
#include <string.h>

#include "cirloop.h"

static int fails = 0;

#define CHECK(cond)                                           \
    do {                                                      \
        if (!(cond)) {                                        \
            fprintf(stderr, "%s:%d: %s\n", __FILE__, __LINE__, #cond); \
            fails++;                                          \
        }                                                     \
    } while (0)

int main(int argc, char **argv) {
    if (argc < 2) {
        fprintf(stderr, "usage: smoke GALLERY\n");
        return 2;
    }
    CirloopGallery *g = NULL;
    CHECK(cirloop_gallery_load(argv[1], CIRLOOP_FORMAT_AUTO, &g) == CIRLOOP_STATUS_OK);
    CHECK(cirloop_gallery_len(g) == 3);
    CHECK(cirloop_gallery_dim(g) == 2);

    float q[2] = {0.0f, 2.0f};
    uint32_t idx[3];
    double scores[3];
    size_t written = 0;
    CHECK(cirloop_rank(g, q, 2, 3, idx, scores, &written) == CIRLOOP_STATUS_OK);
    CHECK(written == 3);
    char *top = cirloop_gallery_image_id(g, idx[0]);
    CHECK(top != NULL && strcmp(top, "up") == 0);
    cirloop_string_free(top);
    CHECK(fabs(scores[0] - 1.0) < 1e-9);

    float bad[3] = {1, 2, 3};
    CHECK(cirloop_rank(g, bad, 3, 3, idx, scores, &written) == CIRLOOP_STATUS_INVALID_ARGUMENT);
    CHECK(cirloop_last_error() != NULL);

    float hist[4] = {1, 0, 0, 1};
    float fused[2];
    CHECK(cirloop_fuse_history(hist, 2, 2, fused) == CIRLOOP_STATUS_OK);
    CHECK(fabs(fused[0] - sqrt(2.0) / 2.0) < 1e-6);

    size_t ranks[3] = {3, 1, 7};
    size_t lengths[2] = {2, 1};
    double hits = -1;
    CHECK(cirloop_hits_at_k(ranks, lengths, 2, 1, 2, &hits) == CIRLOOP_STATUS_OK);
    CHECK(hits == 50.0);

    CirloopGallery *missing = NULL;
    CHECK(cirloop_gallery_load("/nonexistent.cirv", CIRLOOP_FORMAT_AUTO, &missing) == CIRLOOP_STATUS_IO);
    CHECK(missing == NULL);

    cirloop_gallery_free(g);
    printf("%s\n", fails ? "smoke failed" : "smoke ok");
    return fails ? 1 : 0;
}
