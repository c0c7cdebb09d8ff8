#include "reliscope/util.hpp"

#include <algorithm>
#include <array>
#include <atomic>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <thread>

namespace reliscope {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  std::uint64_t z = x;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
  return splitmix64(base ^ splitmix64(stream + 0x632be59bd9b4e019ULL));
}

std::uint64_t derive_seed(std::uint64_t base, const std::string& tag) {
  return derive_seed(base, fnv1a64(tag));
}

std::uint64_t Rng::next_u64() {
  state_ += 0x9e3779b97f4a7c15ULL;
  std::uint64_t z = state_;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

double Rng::uniform() {
  // 53 random bits into [0,1).
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

std::size_t Rng::uniform_index(std::size_t n) {
  if (n == 0) throw std::invalid_argument("uniform_index: n must be > 0");
  // Rejection sampling to avoid modulo bias.
  std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  std::uint64_t v;
  do {
    v = next_u64();
  } while (v >= limit);
  return static_cast<std::size_t>(v % n);
}

bool Rng::bernoulli(double p) { return uniform() < p; }

double Rng::normal() {
  double u1 = uniform();
  double u2 = uniform();
  if (u1 <= 0.0) u1 = 0x1.0p-53;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

std::uint64_t fnv1a64(const void* data, std::size_t len) {
  const auto* p = static_cast<const unsigned char*>(data);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t fnv1a64(const std::string& s) { return fnv1a64(s.data(), s.size()); }

std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = digits[v & 0xf];
    v >>= 4;
  }
  return out;
}

int worker_count() {
  unsigned hw = std::thread::hardware_concurrency();
  int n = hw == 0 ? 1 : static_cast<int>(hw);
  if (const char* env = std::getenv("RELISCOPE_THREADS")) {
    char* end = nullptr;
    long v = std::strtol(env, &end, 10);
    if (end != env && v >= 1) n = std::min<long>(n, v);
  }
  return std::max(1, n);
}

void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn) {
  int workers = worker_count();
  if (n == 0) return;
  if (workers <= 1 || n == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> cursor{0};
  auto run = [&]() {
    for (;;) {
      std::size_t i = cursor.fetch_add(1);
      if (i >= n) return;
      fn(i);
    }
  };
  std::vector<std::thread> pool;
  int spawn = static_cast<int>(std::min<std::size_t>(static_cast<std::size_t>(workers), n));
  pool.reserve(static_cast<std::size_t>(spawn - 1));
  for (int t = 1; t < spawn; ++t) pool.emplace_back(run);
  run();
  for (auto& th : pool) th.join();
}

std::string format_double(double v) {
  std::array<char, 64> buf{};
  auto [ptr, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  (void)ec;
  return std::string(buf.data(), ptr);
}

void write_f32(std::ostream& out, const double* values, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    float f = static_cast<float>(values[i]);
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    unsigned char le[4] = {static_cast<unsigned char>(bits & 0xff),
                           static_cast<unsigned char>((bits >> 8) & 0xff),
                           static_cast<unsigned char>((bits >> 16) & 0xff),
                           static_cast<unsigned char>((bits >> 24) & 0xff)};
    out.write(reinterpret_cast<const char*>(le), 4);
  }
}

bool read_f32(std::istream& in, double* values, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    unsigned char le[4];
    in.read(reinterpret_cast<char*>(le), 4);
    if (!in) return false;
    std::uint32_t bits = static_cast<std::uint32_t>(le[0]) |
                         (static_cast<std::uint32_t>(le[1]) << 8) |
                         (static_cast<std::uint32_t>(le[2]) << 16) |
                         (static_cast<std::uint32_t>(le[3]) << 24);
    float f;
    std::memcpy(&f, &bits, 4);
    values[i] = static_cast<double>(f);
  }
  return true;
}

}  // namespace reliscope
