#include "fx.h"

/* Compiled with sibling-call optimization: the call below is a jmp through
 * the PLT. */
long tj_api1(long x) { return tj_api2(x + 1); }
