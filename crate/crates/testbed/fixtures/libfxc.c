/* Loaded at run time with dlopen. */

int fx_c_data = 42;

long fx_c_work(long x) { return x * x - 7; }
