#include "fx.h"

void fx_b_work(int n) {
    for (int i = 0; i < n; i++)
        ORACLE_CALL("libfxb.so", "fx_noop", fx_noop());
}

long fx_b_chain(long x) {
    long r;
    ORACLE_CALL("libfxb.so", "fx_mid", r = fx_mid(x));
    return r;
}
