/* Shared declarations for the fixture libraries and drivers. */
#ifndef FX_H
#define FX_H

#include <setjmp.h>
#include <stdint.h>

static inline uint64_t fx_rdtsc(void) {
    uint32_t lo, hi;
    __asm__ volatile("rdtsc" : "=a"(lo), "=d"(hi));
    return ((uint64_t)hi << 32) | lo;
}

/* libfxd */
long fx_d_leaf(long x);

/* libfxa */
void fx_noop(void);
long fx_add(long a, long b);
long fx_mid(long x);
void fx_spin(uint64_t cycles);
void fx_spin_serial(uint64_t cycles);
void fx_busy_us(unsigned us);
double fx_hash(long i0, long i1, long i2, long i3, long i4, long i5, long i6, long i7,
               double d0, double d1, double d2, double d3, double d4, double d5, double d6, double d7);
void fx_callback(void (*cb)(int), int depth);
void fx_bail(jmp_buf *jb, int code);
void fx_exit(int code);

/* libfxb */
void fx_b_work(int n);
long fx_b_chain(long x);

/* libtj1..3 */
long tj_api1(long x);
long tj_api2(long x);
long tj_api3(long x);

/* liboracle: append-only event log, active when XFLOW_ORACLE=1 */
void oracle_record(const char *caller, const char *symbol, uint64_t t0, uint64_t t1);
int oracle_enabled(void);

#define ORACLE_CALL(caller, symbol, expr)                     \
    do {                                                      \
        uint64_t fx_t0_ = fx_rdtsc();                         \
        expr;                                                 \
        uint64_t fx_t1_ = fx_rdtsc();                         \
        oracle_record((caller), (symbol), fx_t0_, fx_t1_);    \
    } while (0)

#endif
