#include "dsqp/rng.hpp"

#include <bit>
#include <cmath>

namespace dsqp {

namespace {

constexpr std::uint32_t kMul0 = 0xD2511F53u;
constexpr std::uint32_t kMul1 = 0xCD9E8D57u;
constexpr std::uint32_t kWeyl0 = 0x9E3779B9u;
constexpr std::uint32_t kWeyl1 = 0xBB67AE85u;

inline void mulhilo(std::uint32_t a, std::uint32_t b, std::uint32_t& hi, std::uint32_t& lo) {
  const std::uint64_t p = static_cast<std::uint64_t>(a) * b;
  hi = static_cast<std::uint32_t>(p >> 32);
  lo = static_cast<std::uint32_t>(p);
}

std::array<std::uint32_t, 4> philox(std::array<std::uint32_t, 4> c, std::uint64_t key) {
  std::uint32_t k0 = static_cast<std::uint32_t>(key);
  std::uint32_t k1 = static_cast<std::uint32_t>(key >> 32);
  for (int round = 0; round < 10; ++round) {
    std::uint32_t hi0, lo0, hi1, lo1;
    mulhilo(kMul0, c[0], hi0, lo0);
    mulhilo(kMul1, c[2], hi1, lo1);
    c = {hi1 ^ c[1] ^ k0, lo1, hi0 ^ c[3] ^ k1, lo0};
    k0 += kWeyl0;
    k1 += kWeyl1;
  }
  return c;
}

}  // namespace

std::uint64_t mix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

std::uint64_t tau_tag(double tau) { return mix64(std::bit_cast<std::uint64_t>(tau)); }

Rng::Rng(std::uint64_t seed) : key_(mix64(seed)) {}

Rng::Rng(std::uint64_t seed, std::initializer_list<std::uint64_t> path) : key_(mix64(seed)) {
  for (auto tag : path) key_ = mix64(key_ ^ mix64(tag + 0x632BE59BD9B4E019ULL));
}

Rng Rng::substream(std::uint64_t tag) const {
  Rng child;
  child.key_ = mix64(key_ ^ mix64(tag + 0x632BE59BD9B4E019ULL));
  return child;
}

Rng Rng::substream(std::initializer_list<std::uint64_t> path) const {
  Rng child = *this;
  for (auto tag : path) child = child.substream(tag);
  return child;
}

void Rng::refill() {
  block_ = philox({static_cast<std::uint32_t>(counter_), static_cast<std::uint32_t>(counter_ >> 32), 0u, 0u},
                  key_);
  ++counter_;
  used_ = 0;
}

Rng::result_type Rng::operator()() {
  if (used_ > 2) refill();
  const std::uint64_t out = (static_cast<std::uint64_t>(block_[used_]) << 32) | block_[used_ + 1];
  used_ += 2;
  return out;
}

double Rng::uniform() {
  // 53 random bits, shifted by half an ulp so 0 and 1 are never returned.
  return (static_cast<double>((*this)() >> 11) + 0.5) * 0x1.0p-53;
}

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u, v, s;
  do {
    u = 2.0 * uniform() - 1.0;
    v = 2.0 * uniform() - 1.0;
    s = u * u + v * v;
  } while (s >= 1.0 || s == 0.0);
  const double m = std::sqrt(-2.0 * std::log(s) / s);
  spare_ = v * m;
  has_spare_ = true;
  return u * m;
}

}  // namespace dsqp
