#pragma once

#include <atomic>
#include <cstdint>
#include <vector>

namespace eoq::trace {

/// Quantizer sites of the forward/backward equations. Used by the
/// placement-audit and mode-isolation tests; recording costs one relaxed
/// atomic increment per call.
enum class QuantSite : int { w, a1, a2, gamma, b, e, g, u };

inline std::atomic<std::uint64_t> quant_calls{0};
inline std::atomic<std::uint64_t> bn_stat_calls{0};

// Sequence recording is opt-in and single-threaded by contract.
inline bool recording = false;
inline std::vector<QuantSite> sequence;

inline void record_site(QuantSite s) {
  quant_calls.fetch_add(1, std::memory_order_relaxed);
  if (recording) sequence.push_back(s);
}

inline void record_bn_stats() { bn_stat_calls.fetch_add(1, std::memory_order_relaxed); }

inline void reset() {
  quant_calls = 0;
  bn_stat_calls = 0;
  sequence.clear();
}

} // namespace eoq::trace
