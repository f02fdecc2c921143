/* Allocation count across a long run of traced calls. */
#include <stdio.h>
#include <stdlib.h>

#include "fx.h"

long mcount_calls(void);

int main(int argc, char **argv) {
    long n = argc > 1 ? atol(argv[1]) : 1000000;
    fx_noop();
    fx_add(1, 2);
    long before = mcount_calls();
    long sum = 0;
    for (long i = 0; i < n; i++) {
        fx_noop();
        sum += fx_add(i, 1);
    }
    long after = mcount_calls();
    printf("mcount n=%ld allocations=%ld sum=%ld\n", n, after - before, sum);
    return 0;
}
