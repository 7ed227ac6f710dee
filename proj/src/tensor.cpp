#include "sunet/tensor.hpp"

namespace sunet {

namespace {
std::atomic<bool> g_validation{false};
}

std::string to_string(const Shape& s) {
  return "(" + std::to_string(s.n) + ", " + std::to_string(s.c) + ", " + std::to_string(s.h) + ", " +
         std::to_string(s.w) + ")";
}

void set_validation(bool on) { g_validation.store(on, std::memory_order_relaxed); }
bool validation_enabled() { return g_validation.load(std::memory_order_relaxed); }

}  // namespace sunet
