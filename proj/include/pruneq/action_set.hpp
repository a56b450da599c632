#pragma once

#include <bit>
#include <cstdint>
#include <string>
#include <vector>

#include "pruneq/errors.hpp"

namespace pruneq {

inline constexpr int kMaxActions = 64;

/// A subset of a discrete action space of at most 64 actions.
class ActionSet {
 public:
  ActionSet() = default;

  static ActionSet full(int action_count) {
    check(action_count - 1);
    ActionSet s;
    s.bits_ = action_count == 64 ? ~std::uint64_t{0} : ((std::uint64_t{1} << action_count) - 1);
    return s;
  }
  static ActionSet single(int action) {
    ActionSet s;
    s.insert(action);
    return s;
  }
  static ActionSet from_vector(const std::vector<int>& actions) {
    ActionSet s;
    for (int a : actions) s.insert(a);
    return s;
  }

  void insert(int action) {
    check(action);
    bits_ |= std::uint64_t{1} << action;
  }
  bool contains(int action) const {
    return action >= 0 && action < kMaxActions && ((bits_ >> action) & 1U) != 0;
  }
  int size() const { return std::popcount(bits_); }
  bool empty() const { return bits_ == 0; }
  /// Highest member index + 1, or 0 when empty.
  int bound() const { return bits_ == 0 ? 0 : kMaxActions - std::countl_zero(bits_); }
  std::uint64_t bits() const { return bits_; }

  std::vector<int> to_vector() const {
    std::vector<int> out;
    for (int a = 0; a < kMaxActions; ++a)
      if (contains(a)) out.push_back(a);
    return out;
  }

  bool is_subset_of(const ActionSet& other) const { return (bits_ & ~other.bits_) == 0; }
  friend bool operator==(const ActionSet&, const ActionSet&) = default;

 private:
  static void check(int action) {
    if (action < 0 || action >= kMaxActions)
      throw InvalidArgument("action index " + std::to_string(action) + " outside [0, 64)");
  }
  std::uint64_t bits_ = 0;
};

}  // namespace pruneq
