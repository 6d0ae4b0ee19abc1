#pragma once

// Minimal scalar reverse-mode autodiff.
//
// A Tape records every operation as a node with at most two parents and the
// local partial derivative towards each. `Tape::adjoints` sweeps the nodes in
// reverse creation order, which is a valid topological order because parents
// always precede children.

#include <array>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <vector>

namespace mcpo::ad {

class Tape;

class Var {
 public:
  Var() = default;
  // Constants are untracked: no tape, no node.
  Var(double value) : value_(value) {}  // NOLINT(google-explicit-constructor)

  double value() const { return value_; }
  std::int32_t index() const { return index_; }
  Tape* tape() const { return tape_; }
  bool tracked() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::int32_t index, double value) : tape_(tape), index_(index), value_(value) {}

  Tape* tape_ = nullptr;
  std::int32_t index_ = -1;
  double value_ = 0.0;
};

class Tape {
 public:
  Var variable(double value) { return push(value, {-1, -1}, {0.0, 0.0}); }

  std::size_t size() const { return nodes_.size(); }

  /// Records a node depending on up to two operands; untracked operands are
  /// dropped.
  Var record(double value, const Var& a, double da, const Var& b = Var{}, double db = 0.0) {
    std::array<std::int32_t, 2> parents{-1, -1};
    std::array<double, 2> partials{0.0, 0.0};
    int n = 0;
    if (a.tracked()) parents[n] = a.index(), partials[n++] = da;
    if (b.tracked()) parents[n] = b.index(), partials[n++] = db;
    if (n == 0) return Var(value);
    return push(value, parents, partials);
  }

  /// d(output)/d(node) for every node on the tape.
  std::vector<double> adjoints(const Var& output) const {
    std::vector<double> adj(nodes_.size(), 0.0);
    if (!output.tracked()) return adj;
    adj[static_cast<std::size_t>(output.index())] = 1.0;
    for (std::size_t k = nodes_.size(); k-- > 0;) {
      const double g = adj[k];
      if (g == 0.0) continue;
      const Node& node = nodes_[k];
      for (int j = 0; j < 2; ++j) {
        if (node.parents[j] >= 0) adj[static_cast<std::size_t>(node.parents[j])] += g * node.partials[j];
      }
    }
    return adj;
  }

 private:
  struct Node {
    std::array<std::int32_t, 2> parents;
    std::array<double, 2> partials;
  };

  Var push(double value, std::array<std::int32_t, 2> parents, std::array<double, 2> partials) {
    nodes_.push_back({parents, partials});
    return Var(this, static_cast<std::int32_t>(nodes_.size() - 1), value);
  }

  std::vector<Node> nodes_;
};

namespace detail {
inline Tape* tape_of(const Var& a, const Var& b) { return a.tracked() ? a.tape() : b.tape(); }
}  // namespace detail

inline Var operator+(const Var& a, const Var& b) {
  Tape* t = detail::tape_of(a, b);
  if (!t) return Var(a.value() + b.value());
  return t->record(a.value() + b.value(), a, 1.0, b, 1.0);
}

inline Var operator-(const Var& a, const Var& b) {
  Tape* t = detail::tape_of(a, b);
  if (!t) return Var(a.value() - b.value());
  return t->record(a.value() - b.value(), a, 1.0, b, -1.0);
}

inline Var operator*(const Var& a, const Var& b) {
  Tape* t = detail::tape_of(a, b);
  if (!t) return Var(a.value() * b.value());
  return t->record(a.value() * b.value(), a, b.value(), b, a.value());
}

inline Var operator/(const Var& a, const Var& b) {
  Tape* t = detail::tape_of(a, b);
  const double q = a.value() / b.value();
  if (!t) return Var(q);
  return t->record(q, a, 1.0 / b.value(), b, -q / b.value());
}

inline Var operator-(const Var& a) {
  if (!a.tracked()) return Var(-a.value());
  return a.tape()->record(-a.value(), a, -1.0);
}

inline Var& operator+=(Var& a, const Var& b) { return a = a + b; }
inline Var& operator-=(Var& a, const Var& b) { return a = a - b; }
inline Var& operator*=(Var& a, const Var& b) { return a = a * b; }

inline Var exp(const Var& a) {
  const double e = std::exp(a.value());
  if (!a.tracked()) return Var(e);
  return a.tape()->record(e, a, e);
}

inline Var log(const Var& a) {
  if (!a.tracked()) return Var(std::log(a.value()));
  return a.tape()->record(std::log(a.value()), a, 1.0 / a.value());
}

// Ties resolve to the first operand, matching std::min/std::max.
inline Var min(const Var& a, const Var& b) { return b.value() < a.value() ? b : a; }
inline Var max(const Var& a, const Var& b) { return a.value() < b.value() ? b : a; }

}  // namespace mcpo::ad

namespace mcpo {

template <class S>
concept Scalar = std::same_as<S, double> || std::same_as<S, ad::Var>;

inline double value_of(double x) { return x; }
inline double value_of(const ad::Var& x) { return x.value(); }

inline double smin(double a, double b) { return b < a ? b : a; }
inline double smax(double a, double b) { return a < b ? b : a; }
inline ad::Var smin(const ad::Var& a, const ad::Var& b) { return ad::min(a, b); }
inline ad::Var smax(const ad::Var& a, const ad::Var& b) { return ad::max(a, b); }

template <Scalar S>
S sclamp(const S& x, double lo, double hi) {
  return smin(smax(x, S(lo)), S(hi));
}

}  // namespace mcpo
