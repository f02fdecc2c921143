#include "fx.h"

long tj_api2(long x) { return tj_api3(x * 2); }
