#pragma once

#include <cstdint>
#include <random>
#include <vector>

namespace arfn {

enum class StreamRole : std::uint64_t {
  initial_noise = 1,
  path_noise = 2,
  condition = 3,
  data = 4,
  dmd = 5,
  fake = 6,
  train = 7,
  init_params = 8,
  world = 9,
  eval = 10,
};

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// hash(seed, chunk, step, role, sub); sub distinguishes search candidates.
inline std::uint64_t stream_id(std::uint64_t seed, std::uint64_t chunk, std::uint64_t step, StreamRole role,
                               std::uint64_t sub = 0) {
  std::uint64_t h = splitmix64(seed);
  h = splitmix64(h ^ chunk);
  h = splitmix64(h ^ (step << 1));
  h = splitmix64(h ^ static_cast<std::uint64_t>(role));
  h = splitmix64(h ^ sub);
  return h;
}

class Rng {
 public:
  explicit Rng(std::uint64_t id = 0) : id_(id), eng_(id) {}

  std::uint64_t id() const { return id_; }
  double normal() { return normal_(eng_); }
  double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(eng_); }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  std::size_t below(std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(eng_); }
  std::uint64_t next_u64() { return eng_(); }

  template <class T>
  std::vector<T> normals(std::size_t n) {
    std::vector<T> v(n);
    for (auto& e : v) e = static_cast<T>(normal());
    return v;
  }

 private:
  std::uint64_t id_;
  std::mt19937_64 eng_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

}  // namespace arfn
