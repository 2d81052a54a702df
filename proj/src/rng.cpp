#include "crosskd/rng.hpp"

#include <cmath>
#include <numbers>

namespace crosskd {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

namespace {

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

RngStream::RngStream(std::uint64_t seed, std::string_view label)
    : RngStream(seed, std::string(label), splitmix64(splitmix64(seed) ^ fnv1a(label))) {}

RngStream::RngStream(std::uint64_t seed, std::string label, std::uint64_t key)
    : seed_(seed), label_(std::move(label)), key_(key), engine_(key) {}

RngStream RngStream::fork(std::uint64_t index) const {
  return RngStream(seed_, label_ + "/" + std::to_string(index),
                   splitmix64(key_ ^ splitmix64(index + 0x632be59bd9b4e019ULL)));
}

double RngStream::uniform() {
  return static_cast<double>((*this)() >> 11) * 0x1.0p-53;
}

std::uint64_t RngStream::below(std::uint64_t n) {
  // Rejection sampling keeps the draw unbiased.
  const std::uint64_t limit = max() - max() % n;
  std::uint64_t v;
  do {
    v = (*this)();
  } while (v >= limit);
  return v % n;
}

double RngStream::normal() {
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

}  // namespace crosskd
