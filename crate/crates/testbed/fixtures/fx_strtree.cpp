// Ordered tree keyed by strings with long shared prefixes; lookups dominate.
// Built without optimization so string comparison stays an out-of-line call
// into the C++ runtime.
#include <cstdio>
#include <cstdlib>
#include <map>
#include <string>
#include <vector>

int main(int argc, char **argv) {
    long keys = argc > 1 ? std::atol(argv[1]) : 20000;
    long lookups = argc > 2 ? std::atol(argv[2]) : 200000;
    std::vector<std::string> names;
    names.reserve(keys);
    unsigned long seed = 2463534242ul;
    for (long i = 0; i < keys; i++) {
        std::string s("netlist/element/block-");
        for (int k = 0; k < 12; k++) {
            seed ^= seed << 13;
            seed ^= seed >> 17;
            seed ^= seed << 5;
            s.push_back(static_cast<char>('a' + seed % 26));
        }
        names.push_back(s);
    }
    std::map<std::string, long> tree;
    for (long i = 0; i < keys; i++)
        tree[names[i]] = i;
    long hits = 0;
    for (long i = 0; i < lookups; i++) {
        seed ^= seed << 13;
        seed ^= seed >> 17;
        seed ^= seed << 5;
        if (tree.find(names[seed % keys]) != tree.end())
            hits++;
    }
    std::printf("strtree keys=%ld lookups=%ld hits=%ld size=%zu\n", keys, lookups, hits, tree.size());
    return 0;
}
