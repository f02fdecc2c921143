/* Multi-mode driver. Usage: fx_driver MODE [ARGS...]. Every API call it
 * makes to a fixture library is bracketed for the oracle; expected counts
 * per mode are closed-form in the arguments. */
#define _GNU_SOURCE
#include <dlfcn.h>
#include <errno.h>
#include <pthread.h>
#include <semaphore.h>
#include <setjmp.h>
#include <signal.h>
#include <stdio.h>
#include <stdlib.h>
#include <string.h>
#include <sys/stat.h>
#include <sys/wait.h>
#include <time.h>
#include <unistd.h>

#include "fx.h"

static const char *me = "fx_driver";

static void *probe(const char *name) { return dlsym(RTLD_DEFAULT, name); }

static long probe_long(const char *name) {
    long (*f)(void) = (long (*)(void))probe(name);
    return f ? f() : -100;
}

static long arg(int argc, char **argv, int i, long dflt) { return i < argc ? atol(argv[i]) : dflt; }

static long rss_kb(const char *field) {
    FILE *f = fopen("/proc/self/status", "r");
    char line[256];
    long v = -1;
    size_t n = strlen(field);
    while (f && fgets(line, sizeof line, f))
        if (strncmp(line, field, n) == 0 && line[n] == ':')
            v = atol(line + n + 1);
    if (f)
        fclose(f);
    return v;
}

static int mode_basic(long n) {
    long sum = 0, chain = 0;
    for (long i = 0; i < n; i++)
        ORACLE_CALL(me, "fx_noop", fx_noop());
    for (long i = 0; i < n; i++)
        ORACLE_CALL(me, "fx_add", sum += fx_add(i, 1));
    ORACLE_CALL(me, "fx_b_work", fx_b_work((int)n));
    for (long i = 0; i < n; i++)
        ORACLE_CALL(me, "fx_b_chain", chain += fx_b_chain(i));
    printf("basic n=%ld sum=%ld chain=%ld\n", n, sum, chain);
    return sum == n * (n - 1) / 2 + n ? 0 : 3;
}

static int mode_dlsym(long n) {
    void *h = dlopen("libfxc.so", RTLD_NOW);
    if (!h) {
        fprintf(stderr, "dlopen: %s\n", dlerror());
        return 3;
    }
    long (*f)(long) = (long (*)(long))dlsym(h, "fx_c_work");
    long (*g)(long) = (long (*)(long))dlsym(h, "fx_c_work");
    int *data = (int *)dlsym(h, "fx_c_data");
    if (!f || f != g || !data || *data != 42) {
        fprintf(stderr, "dlsym results inconsistent\n");
        return 3;
    }
    long sum = 0;
    for (long i = 0; i < n; i++)
        ORACLE_CALL(me, "fx_c_work", sum += f(i));
    printf("dlsym n=%ld sum=%ld data=%d\n", n, sum, *data);
    return 0;
}

static int mode_tail(long n) {
    long sum = 0, want = 0;
    for (long i = 0; i < n; i++) {
        ORACLE_CALL(me, "tj_api1", sum += tj_api1(i));
        want += (i + 1) * 2 + 3;
    }
    printf("tail n=%ld sum=%ld\n", n, sum);
    return sum == want ? 0 : 3;
}

struct work {
    long n;
    pthread_barrier_t *barrier;
};

static void *worker(void *p) {
    struct work *w = p;
    long sum = 0;
    pthread_barrier_wait(w->barrier);
    for (long i = 0; i < w->n; i++)
        ORACLE_CALL(me, "fx_noop", fx_noop());
    for (long i = 0; i < w->n; i++)
        ORACLE_CALL(me, "fx_add", sum += fx_add(i, 2));
    pthread_barrier_wait(w->barrier);
    return (void *)sum;
}

static int mode_threads(long nthreads, long n) {
    pthread_t t[64];
    pthread_barrier_t barrier;
    struct work w = {n, &barrier};
    if (nthreads > 64)
        nthreads = 64;
    long before = probe_long("xflow_probe_active_threads");
    pthread_barrier_init(&barrier, NULL, (unsigned)nthreads + 1);
    for (long i = 0; i < nthreads; i++)
        pthread_create(&t[i], NULL, worker, &w);
    pthread_barrier_wait(&barrier);
    long during = probe_long("xflow_probe_active_threads");
    pthread_barrier_wait(&barrier);
    long total = 0;
    for (long i = 0; i < nthreads; i++) {
        void *r;
        pthread_join(t[i], &r);
        total += (long)r;
    }
    long after = probe_long("xflow_probe_active_threads");
    printf("threads=%ld n=%ld sum=%ld active=%ld,%ld,%ld\n", nthreads, n, total, before, during, after);
    return 0;
}

static sem_t parked;
static long abn_n;

static void leave_early(void) {
    for (long i = 0; i < abn_n; i++)
        ORACLE_CALL(me, "fx_noop", fx_noop());
    pthread_exit(NULL);
}

static void *exiting_worker(void *p) {
    (void)p;
    leave_early();
    return NULL;
}

static void *parked_worker(void *p) {
    (void)p;
    for (long i = 0; i < abn_n; i++)
        ORACLE_CALL(me, "fx_noop", fx_noop());
    sem_post(&parked);
    for (;;)
        pause();
    return NULL;
}

static int mode_abnormal(long n) {
    pthread_t a, b;
    abn_n = n;
    sem_init(&parked, 0, 0);
    pthread_create(&a, NULL, exiting_worker, NULL);
    pthread_create(&b, NULL, parked_worker, NULL);
    pthread_detach(b);
    for (long i = 0; i < n; i++)
        ORACLE_CALL(me, "fx_noop", fx_noop());
    while (sem_wait(&parked) != 0 && errno == EINTR)
        ;
    pthread_join(a, NULL);
    printf("abnormal n=%ld\n", n);
    fflush(stdout);
    /* Process exit from inside an intercepted call, with a thread parked. */
    fx_exit(0);
    return 1;
}

static int mode_longjmp(long n) {
    int bailed = 0;
    for (long i = 0; i < n; i++) {
        jmp_buf jb;
        if (setjmp(jb) == 0)
            ORACLE_CALL(me, "fx_bail", fx_bail(&jb, 1));
        else
            bailed++;
    }
    ORACLE_CALL(me, "fx_noop", fx_noop());
    long depth = probe_long("xflow_probe_shadow_depth");
    printf("longjmp n=%ld bailed=%d depth=%ld\n", n, bailed, depth);
    return bailed == n ? 0 : 3;
}

static long depths[8];

static void nest(int d) {
    depths[d] = probe_long("xflow_probe_shadow_depth");
    if (d < 3)
        fx_callback(nest, d + 1);
    __asm__ volatile("" ::: "memory");
}

static int mode_probe(void) {
    long r0 = probe_long("xflow_probe_resolver_entries");
    fx_add(1, 2);
    long r1 = probe_long("xflow_probe_resolver_entries");
    fx_add(3, 4);
    long r2 = probe_long("xflow_probe_resolver_entries");
    fx_callback(nest, 0);
    long sites = probe_long("xflow_probe_site_count");
    long replan = probe_long("xflow_probe_replan");
    long detach = probe_long("xflow_probe_detach");
    fx_noop();
    printf("resolver=%ld,%ld depths=%ld,%ld,%ld,%ld top=%ld sites=%ld replan=%ld detach=%ld\n", r1 - r0, r2 - r1,
           depths[0], depths[1], depths[2], depths[3], probe_long("xflow_probe_shadow_depth"), sites, replan, detach);
    return 0;
}

static int mode_hash(void) {
    for (int k = 0; k < 16; k++) {
        double r = fx_hash(k, -k, k * 3, 1L << k, -7, 11, k * k, 1000000007L * k, k * 0.5, -k * 1.25, 3.5, k / 7.0,
                           1e-3 * k, -2.0, k * k * 0.125, 1e3 / (k + 1));
        char buf[64];
        snprintf(buf, sizeof buf, "%a", r);
        printf("%d %s %.17g\n", k, buf, r);
    }
    return 0;
}

static int mode_oracle(long n) {
    uint64_t seed = 88172645463325252ull;
    for (long i = 0; i < n; i++) {
        seed ^= seed << 13;
        seed ^= seed >> 7;
        seed ^= seed << 17;
        uint64_t cycles = 20000 + seed % 180000;
        ORACLE_CALL(me, "fx_spin", fx_spin(cycles));
        ORACLE_CALL(me, "fx_noop", fx_noop());
    }
    ORACLE_CALL(me, "fx_b_work", fx_b_work((int)n));
    printf("oracle n=%ld\n", n);
    return 0;
}

struct spin {
    long n;
    uint64_t cycles;
    pthread_barrier_t *barrier;
};

static void *spinner(void *p) {
    struct spin *s = p;
    pthread_barrier_wait(s->barrier);
    for (long i = 0; i < s->n; i++)
        fx_spin(s->cycles);
    pthread_barrier_wait(s->barrier);
    return NULL;
}

static int mode_attr(long n, long cycles) {
    pthread_t t[3];
    pthread_barrier_t barrier;
    struct spin s = {n, (uint64_t)cycles, &barrier};
    pthread_barrier_init(&barrier, NULL, 4);
    for (int i = 0; i < 3; i++)
        pthread_create(&t[i], NULL, spinner, &s);
    spinner(&s);
    for (int i = 0; i < 3; i++)
        pthread_join(t[i], NULL);
    for (long i = 0; i < n; i++)
        fx_spin_serial((uint64_t)cycles);
    printf("attr n=%ld cycles=%ld\n", n, cycles);
    return 0;
}

static int mode_timing(long samples, long us) {
    unsigned long (*raw)(const char *) = (unsigned long (*)(const char *))probe("xflow_probe_raw_cycles");
    printf("hz %ld\n", probe_long("xflow_probe_hz"));
    for (long i = 0; i < samples; i++) {
        unsigned long a = raw ? raw("fx_busy_us") : 0;
        fx_busy_us((unsigned)us);
        unsigned long b = raw ? raw("fx_busy_us") : 0;
        printf("sample %lu\n", b - a);
    }
    return 0;
}

static pthread_barrier_t imb_barrier;
static long heavy_us, light_us;

static void *heavy_worker(void *p) {
    (void)p;
    fx_busy_us((unsigned)heavy_us);
    pthread_barrier_wait(&imb_barrier);
    return NULL;
}

static void *light_worker(void *p) {
    (void)p;
    fx_busy_us((unsigned)light_us);
    pthread_barrier_wait(&imb_barrier);
    return NULL;
}

static int mode_imbalance(long heavy_ms, long light_ms) {
    pthread_t t[4];
    heavy_us = heavy_ms * 1000;
    light_us = light_ms * 1000;
    pthread_barrier_init(&imb_barrier, NULL, 4);
    for (int i = 0; i < 4; i++)
        pthread_create(&t[i], NULL, i < 2 ? heavy_worker : light_worker, NULL);
    for (int i = 0; i < 4; i++)
        pthread_join(t[i], NULL);
    printf("imbalance %ld %ld\n", heavy_ms, light_ms);
    return 0;
}

static int mode_loop(long n) {
    for (long i = 0; i < n; i++)
        fx_noop();
    printf("loop n=%ld rss_kb=%ld hwm_kb=%ld\n", n, rss_kb("VmRSS"), rss_kb("VmHWM"));
    return 0;
}

static int cmp_long(const void *a, const void *b) {
    long x = *(const long *)a, y = *(const long *)b;
    return (x > y) - (x < y);
}

static long mono_ns(void) {
    struct timespec ts;
    clock_gettime(CLOCK_MONOTONIC, &ts);
    return ts.tv_sec * 1000000000L + ts.tv_nsec;
}

/* Median per-call cost of fx_noop over batches, in picoseconds. */
static int mode_bench(long batches, long per_batch) {
    long *ps = malloc(sizeof(long) * (size_t)batches);
    for (long b = 0; b < batches; b++) {
        long t0 = mono_ns();
        for (long i = 0; i < per_batch; i++)
            fx_noop();
        long t1 = mono_ns();
        ps[b] = (t1 - t0) * 1000 / per_batch;
    }
    qsort(ps, (size_t)batches, sizeof(long), cmp_long);
    printf("bench median_ps=%ld\n", ps[batches / 2]);
    free(ps);
    return 0;
}

/* Ask for a snapshot mid-run and wait until it appears. */
static int mode_signal(long n) {
    for (long i = 0; i < n; i++)
        fx_noop();
    const char *out = getenv("XFLOW_OUT_DIR");
    char path[4096];
    snprintf(path, sizeof path, "%s/snapshot-0001", out ? out : ".");
    kill(getpid(), SIGUSR1);
    struct stat st;
    int seen = 0;
    for (int i = 0; i < 200 && !seen; i++) {
        seen = stat(path, &st) == 0;
        if (!seen)
            usleep(10000);
    }
    usleep(50000);
    for (long i = 0; i < n; i++)
        fx_noop();
    printf("signal n=%ld snapshot=%d\n", n, seen);
    return 0;
}

static int mode_fork(long n, long m) {
    for (long i = 0; i < n; i++)
        fx_noop();
    fflush(stdout);
    pid_t pid = fork();
    if (pid == 0) {
        for (long i = 0; i < m; i++)
            fx_add(i, 1);
        exit(0);
    }
    int status = 0;
    waitpid(pid, &status, 0);
    for (long i = 0; i < n; i++)
        fx_noop();
    printf("fork n=%ld m=%ld child=%d\n", n, m, WIFEXITED(status) ? WEXITSTATUS(status) : -1);
    return 0;
}

int main(int argc, char **argv) {
    const char *slash = strrchr(argv[0], '/');
    me = slash ? slash + 1 : argv[0];
    const char *mode = argc > 1 ? argv[1] : "basic";
    setvbuf(stdout, NULL, _IOLBF, 0);
    if (!strcmp(mode, "basic"))
        return mode_basic(arg(argc, argv, 2, 1000));
    if (!strcmp(mode, "dlsym"))
        return mode_dlsym(arg(argc, argv, 2, 1000));
    if (!strcmp(mode, "tail"))
        return mode_tail(arg(argc, argv, 2, 1000));
    if (!strcmp(mode, "threads"))
        return mode_threads(arg(argc, argv, 2, 4), arg(argc, argv, 3, 250));
    if (!strcmp(mode, "abnormal"))
        return mode_abnormal(arg(argc, argv, 2, 100));
    if (!strcmp(mode, "longjmp"))
        return mode_longjmp(arg(argc, argv, 2, 100));
    if (!strcmp(mode, "probe"))
        return mode_probe();
    if (!strcmp(mode, "hash"))
        return mode_hash();
    if (!strcmp(mode, "oracle"))
        return mode_oracle(arg(argc, argv, 2, 2000));
    if (!strcmp(mode, "attr"))
        return mode_attr(arg(argc, argv, 2, 200), arg(argc, argv, 3, 200000));
    if (!strcmp(mode, "timing"))
        return mode_timing(arg(argc, argv, 2, 1000), arg(argc, argv, 3, 1000));
    if (!strcmp(mode, "imbalance"))
        return mode_imbalance(arg(argc, argv, 2, 480), arg(argc, argv, 3, 30));
    if (!strcmp(mode, "loop"))
        return mode_loop(arg(argc, argv, 2, 1000));
    if (!strcmp(mode, "bench"))
        return mode_bench(arg(argc, argv, 2, 100), arg(argc, argv, 3, 100000));
    if (!strcmp(mode, "signal"))
        return mode_signal(arg(argc, argv, 2, 1000));
    if (!strcmp(mode, "fork"))
        return mode_fork(arg(argc, argv, 2, 100), arg(argc, argv, 3, 50));
    fprintf(stderr, "unknown mode %s\n", mode);
    return 2;
}
