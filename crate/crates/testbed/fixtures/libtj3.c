#include "fx.h"

long tj_api3(long x) { return x + 3; }
