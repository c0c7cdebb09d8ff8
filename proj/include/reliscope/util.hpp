#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace reliscope {

// Stateless splitmix64 step; used to derive independent seed streams so that
// per-item work can run in any order without changing results.
std::uint64_t splitmix64(std::uint64_t x);
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream);
std::uint64_t derive_seed(std::uint64_t base, const std::string& tag);

// Self-contained PRNG. All sampling is implemented on the raw 64-bit stream,
// never on standard-library distributions, so a (seed, call sequence) pair
// produces the same values on every platform.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64();
  double uniform();                        // [0, 1)
  double uniform(double lo, double hi);    // [lo, hi)
  std::size_t uniform_index(std::size_t n);  // [0, n), n > 0
  bool bernoulli(double p);
  double normal();                         // standard normal, Box-Muller

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = uniform_index(i);
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::uint64_t state_;
};

std::uint64_t fnv1a64(const void* data, std::size_t len);
std::uint64_t fnv1a64(const std::string& s);
std::string hex64(std::uint64_t v);

// Rounds a double to the nearest value representable in 32-bit float.
// Parameters and serialized vectors are kept on this grid so that the f32
// file formats round-trip without changing downstream results.
inline double quantize_f32(double x) { return static_cast<double>(static_cast<float>(x)); }

// Number of workers parallel_for may use: min(RELISCOPE_THREADS if set,
// hardware concurrency), at least 1.
int worker_count();

// Runs fn(i) for i in [0, n). Callers must write results to disjoint
// per-index slots; the schedule is unspecified.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

std::string format_double(double v);  // shortest round-trip decimal

// Little-endian f32 blocks shared by the checkpoint and .cmodel formats.
void write_f32(std::ostream& out, const double* values, std::size_t n);
bool read_f32(std::istream& in, double* values, std::size_t n);  // false when short

}  // namespace reliscope
