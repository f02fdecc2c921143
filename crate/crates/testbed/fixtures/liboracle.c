/* Brute-force reference log: every bracketed call is appended as one line,
 * independent of the profiler's folding. */
#include <pthread.h>
#include <stdio.h>
#include <stdlib.h>
#include <string.h>
#include <sys/syscall.h>
#include <unistd.h>

#include "fx.h"

struct event {
    const char *caller;
    const char *symbol;
    long tid;
    uint64_t t0, t1;
};

static int enabled = -1;
static struct event *events;
static size_t len, cap;
static pthread_mutex_t lock = PTHREAD_MUTEX_INITIALIZER;

int oracle_enabled(void) {
    if (enabled < 0) {
        const char *v = getenv("XFLOW_ORACLE");
        enabled = v && strcmp(v, "1") == 0;
    }
    return enabled;
}

void oracle_record(const char *caller, const char *symbol, uint64_t t0, uint64_t t1) {
    if (!oracle_enabled())
        return;
    long tid = syscall(SYS_gettid);
    pthread_mutex_lock(&lock);
    if (len == cap) {
        cap = cap ? cap * 2 : 4096;
        events = realloc(events, cap * sizeof *events);
    }
    events[len++] = (struct event){caller, symbol, tid, t0, t1};
    pthread_mutex_unlock(&lock);
}

__attribute__((destructor)) static void oracle_flush(void) {
    if (!oracle_enabled() || !len)
        return;
    const char *path = getenv("XFLOW_ORACLE_OUT");
    FILE *f = fopen(path ? path : "oracle.log", "w");
    if (!f)
        return;
    for (size_t i = 0; i < len; i++)
        fprintf(f, "%ld\t%s\t%s\t%lu\t%lu\n", events[i].tid, events[i].caller, events[i].symbol,
                (unsigned long)events[i].t0, (unsigned long)events[i].t1);
    fclose(f);
}
