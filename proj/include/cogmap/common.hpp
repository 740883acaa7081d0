#pragma once
// Shared error types, logging, deterministic seed derivation, and a small
// parallel-for helper.

#include <atomic>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <functional>
#include <mutex>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

namespace cogmap {

// Invalid inputs, broken manifests, contract violations. CLI exit code 2.
struct ValidationError : std::runtime_error {
    explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

// Solver / numeric breakdowns (non-convergence, singular systems). CLI exit code 3.
struct NumericalError : std::runtime_error {
    explicit NumericalError(const std::string& msg) : std::runtime_error(msg) {}
};

// FNV-1a 64-bit over a tag string.
inline std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

// Deterministic sub-seed for a named task: independent streams per tag, stable
// across platforms and schedules.
inline std::uint64_t derive_seed(std::uint64_t master, std::string_view tag) {
    return splitmix64(master ^ fnv1a64(tag));
}

// Minimal thread-safe logger (warnings from deep inside parallel sections).
class Log {
  public:
    static void warn(const std::string& msg) { emit("warning: ", msg); }
    static void info(const std::string& msg) { emit("", msg); }
    // Quiet mode for tests that intentionally trigger warnings.
    static void set_quiet(bool q) { quiet() = q; }

  private:
    static void emit(const char* prefix, const std::string& msg);
    static bool& quiet() {
        static bool q = false;
        return q;
    }
    static std::mutex& mu() {
        static std::mutex m;
        return m;
    }
};

inline void Log::emit(const char* prefix, const std::string& msg) {
    std::lock_guard<std::mutex> lock(mu());
    if (quiet()) return;
    std::fprintf(stderr, "%s%s\n", prefix, msg.c_str());
}

// Run fn(0..n-1) on up to `jobs` worker threads. Work items must be
// independent; any per-item randomness must come from item-derived seeds so
// results do not depend on the schedule. The first exception thrown by a
// worker is rethrown on the calling thread after all workers join.
inline void parallel_for(int jobs, int n, const std::function<void(int)>& fn) {
    if (n <= 0) return;
    jobs = std::max(1, std::min(jobs, n));
    if (jobs == 1) {
        for (int i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<int> next{0};
    std::exception_ptr first_error;
    std::mutex err_mu;
    auto worker = [&] {
        for (;;) {
            int i = next.fetch_add(1);
            if (i >= n) return;
            try {
                fn(i);
            } catch (...) {
                std::lock_guard<std::mutex> lock(err_mu);
                if (!first_error) first_error = std::current_exception();
                next.store(n); // stop handing out work
                return;
            }
        }
    };
    std::vector<std::thread> threads;
    threads.reserve(jobs);
    for (int t = 0; t < jobs; ++t) threads.emplace_back(worker);
    for (auto& t : threads) t.join();
    if (first_error) std::rethrow_exception(first_error);
}

} // namespace cogmap
