#include "fx.h"

long fx_d_leaf(long x) { return x * 3 + 1; }
