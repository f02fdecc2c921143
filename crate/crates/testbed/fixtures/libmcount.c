/* Counting allocator interposed in front of the C library's. */
#define _GNU_SOURCE
#include <dlfcn.h>
#include <stddef.h>
#include <string.h>

static void *(*real_malloc)(size_t);
static void (*real_free)(void *);
static void *(*real_calloc)(size_t, size_t);
static void *(*real_realloc)(void *, size_t);

static long calls;
static __thread int resolving;
static _Alignas(16) char boot[1 << 16];
static size_t boot_used;

static void *boot_alloc(size_t n) {
    n = (n + 15) & ~(size_t)15;
    if (boot_used + n > sizeof boot)
        return NULL;
    void *p = boot + boot_used;
    boot_used += n;
    return p;
}

static int from_boot(void *p) { return (char *)p >= boot && (char *)p < boot + sizeof boot; }

static void resolve(void) {
    resolving = 1;
    real_malloc = dlsym(RTLD_NEXT, "malloc");
    real_free = dlsym(RTLD_NEXT, "free");
    real_calloc = dlsym(RTLD_NEXT, "calloc");
    real_realloc = dlsym(RTLD_NEXT, "realloc");
    resolving = 0;
}

void *malloc(size_t n) {
    if (!real_malloc) {
        if (resolving)
            return boot_alloc(n);
        resolve();
    }
    __atomic_add_fetch(&calls, 1, __ATOMIC_RELAXED);
    return real_malloc(n);
}

void *calloc(size_t a, size_t b) {
    if (!real_calloc) {
        if (resolving)
            return boot_alloc(a * b);
        resolve();
    }
    __atomic_add_fetch(&calls, 1, __ATOMIC_RELAXED);
    return real_calloc(a, b);
}

void *realloc(void *p, size_t n) {
    if (!real_realloc)
        resolve();
    __atomic_add_fetch(&calls, 1, __ATOMIC_RELAXED);
    if (from_boot(p)) {
        void *q = real_malloc(n);
        size_t avail = (size_t)(boot + sizeof boot - (char *)p);
        memcpy(q, p, n < avail ? n : avail);
        return q;
    }
    return real_realloc(p, n);
}

void free(void *p) {
    if (!p || from_boot(p))
        return;
    if (!real_free)
        resolve();
    real_free(p);
}

long mcount_calls(void) { return __atomic_load_n(&calls, __ATOMIC_RELAXED); }
