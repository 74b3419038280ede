/* Minimal C consumer of the dropattn FFI.
 *
 *   cargo build -p dropattn-ffi
 *   cc crates/ffi/examples/smoke.c target/debug/libdropattn_ffi.a \
 *      -Icrates/ffi/include -lpthread -ldl -lm -o smoke && ./smoke
 */
#include <assert.h>
#include <stdio.h>

#include "dropattn.h"

int main(void) {
    printf("dropattn %s\n", dropattn_version());

    DaRng *rng = NULL;
    assert(dropattn_rng_new(42, &rng) == DaStatus_Ok);

    /* Uniform 5x5 attention weights. */
    float lambda[25], out[25];
    for (int i = 0; i < 25; i++) lambda[i] = 0.2f;

    assert(dropattn_apply(rng, lambda, 5, DaVariant_Column, 0.4f, 2,
                          DaRescale_Normalized, true, out) == DaStatus_Ok);
    for (int i = 0; i < 5; i++) {
        double sum = 0.0;
        for (int j = 0; j < 5; j++) sum += out[i * 5 + j];
        assert(sum > 0.999999 && sum < 1.000001);
    }

    double entropy = 0.0;
    float row[4] = {0.5f, 0.5f, 0.0f, 0.0f};
    assert(dropattn_entropy(row, 4, &entropy) == DaStatus_Ok);
    printf("entropy(0.5, 0.5, 0, 0) = %f\n", entropy);

    dropattn_rng_free(rng);
    printf("ok\n");
    return 0;
}
