#include <stdlib.h>
#include <time.h>

#include "fx.h"

void fx_noop(void) { __asm__ volatile("" ::: "memory"); }

long fx_add(long a, long b) { return a + b; }

long fx_mid(long x) {
    long r;
    ORACLE_CALL("libfxa.so", "fx_d_leaf", r = fx_d_leaf(x));
    return r + 1;
}

static void spin_cycles(uint64_t cycles) {
    uint64_t end = fx_rdtsc() + cycles;
    while (fx_rdtsc() < end)
        __asm__ volatile("pause");
}

void fx_spin(uint64_t cycles) { spin_cycles(cycles); }

void fx_spin_serial(uint64_t cycles) { spin_cycles(cycles); }

static uint64_t now_ns(void) {
    struct timespec ts;
    clock_gettime(CLOCK_MONOTONIC, &ts);
    return (uint64_t)ts.tv_sec * 1000000000u + (uint64_t)ts.tv_nsec;
}

void fx_busy_us(unsigned us) {
    uint64_t end = now_ns() + (uint64_t)us * 1000u;
    while (now_ns() < end)
        __asm__ volatile("pause");
}

/* Every argument lands in the result with a distinct weight, so a clobbered
 * register changes the output. */
double fx_hash(long i0, long i1, long i2, long i3, long i4, long i5, long i6, long i7,
               double d0, double d1, double d2, double d3, double d4, double d5, double d6, double d7) {
    unsigned long h = 1469598103934665603ul;
    long ints[8] = {i0, i1, i2, i3, i4, i5, i6, i7};
    for (int k = 0; k < 8; k++)
        h = (h ^ (unsigned long)ints[k]) * 1099511628211ul;
    double f = d0 * 1.5 + d1 * 2.25 - d2 * 3.125 + d3 * 4.0625 + d4 / 5.5 - d5 * 6.75 + d6 * 7.875 - d7 / 8.5;
    return (double)(h >> 11) * 0x1p-53 + f;
}

/* Not a tail call: the callback must run inside this frame. */
void fx_callback(void (*cb)(int), int depth) {
    cb(depth);
    __asm__ volatile("" ::: "memory");
}

void fx_bail(jmp_buf *jb, int code) { longjmp(*jb, code); }

void fx_exit(int code) { exit(code); }
