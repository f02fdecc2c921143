/* Built with -fno-plt: every library call goes through a GOT cell. */
#include <stdio.h>
#include <stdlib.h>

#include "fx.h"

int main(int argc, char **argv) {
    long n = argc > 1 ? atol(argv[1]) : 1000, sum = 0;
    for (long i = 0; i < n; i++)
        ORACLE_CALL("fx_nplt", "fx_noop", fx_noop());
    for (long i = 0; i < n; i++)
        ORACLE_CALL("fx_nplt", "fx_add", sum += fx_add(i, i));
    printf("nplt n=%ld sum=%ld\n", n, sum);
    return sum == n * (n - 1) ? 0 : 3;
}
