#ifndef EOC_PARALLEL_HPP
#define EOC_PARALLEL_HPP

#include <cstdint>
#include <functional>

namespace eoc::parallel {

// Worker-pool size: EOC_WORKERS env var, else hardware concurrency.
int worker_count();

// Runs fn(i) for i in [0, n). Results must be written to per-index slots so the
// outcome is independent of scheduling. Exceptions from workers are rethrown
// (the one with the lowest index wins, deterministically).
void parallel_for(int n, const std::function<void(int)>& fn);

// Deterministic, platform-independent random streams (splitmix64 based).
std::uint64_t splitmix64(std::uint64_t& state);
double uniform01(std::uint64_t& state);
// Standard normal draw keyed by (seed, tag, index, component); the same key
// always yields the same value, which keeps paused/resumed runs identical.
double keyed_normal(std::uint64_t seed, std::uint64_t tag, std::uint64_t index, std::uint64_t component);

} // namespace eoc::parallel

#endif
