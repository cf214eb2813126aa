// Dense two-phase primal simplex for small linear programs.
#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <stdexcept>
#include <vector>

namespace ccfa::lp {

enum class Relation { less_equal, equal, greater_equal };

struct Constraint {
  std::vector<double> coef;  // one per structural variable
  Relation rel = Relation::less_equal;
  double rhs = 0.0;
};

/// maximize objective . x  subject to constraints, x >= 0.
struct LinearProgram {
  std::size_t num_vars = 0;
  std::vector<double> objective;
  std::vector<Constraint> constraints;
};

enum class Status { optimal, infeasible, unbounded };

struct Solution {
  Status status = Status::infeasible;
  std::vector<double> x;
  double objective = 0.0;
  std::size_t pivots = 0;
};

namespace detail {

class Tableau {
 public:
  Tableau(std::size_t m, std::size_t n) : m_(m), n_(n), a_(m * (n + 1), 0.0), basis_(m, 0) {}

  double& at(std::size_t r, std::size_t c) { return a_[r * (n_ + 1) + c]; }
  double at(std::size_t r, std::size_t c) const { return a_[r * (n_ + 1) + c]; }
  double& rhs(std::size_t r) { return at(r, n_); }
  double rhs(std::size_t r) const { return at(r, n_); }
  std::vector<std::size_t>& basis() { return basis_; }
  std::size_t rows() const { return m_; }
  std::size_t cols() const { return n_; }

  void pivot(std::size_t r, std::size_t c) {
    const double p = at(r, c);
    for (std::size_t j = 0; j <= n_; ++j) at(r, j) /= p;
    for (std::size_t i = 0; i < m_; ++i) {
      if (i == r) continue;
      const double f = at(i, c);
      if (f == 0.0) continue;
      for (std::size_t j = 0; j <= n_; ++j) at(i, j) -= f * at(r, j);
      at(i, c) = 0.0;
    }
    basis_[r] = c;
  }

  /// Maximises cost . x over the current basis using Bland's rule. Columns
  /// with allowed[c] == false never enter. Returns false when unbounded.
  bool optimize(const std::vector<double>& cost, const std::vector<bool>& allowed,
                std::size_t& pivots, double eps) {
    std::vector<double> reduced(n_);
    for (;;) {
      for (std::size_t j = 0; j < n_; ++j) {
        double z = 0.0;
        for (std::size_t i = 0; i < m_; ++i) z += cost[basis_[i]] * at(i, j);
        reduced[j] = cost[j] - z;
      }
      std::size_t enter = n_;
      for (std::size_t j = 0; j < n_; ++j) {
        if (allowed[j] && reduced[j] > eps) {
          enter = j;
          break;
        }
      }
      if (enter == n_) return true;
      std::size_t leave = m_;
      double best = std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < m_; ++i) {
        const double a = at(i, enter);
        if (a <= eps) continue;
        const double ratio = rhs(i) / a;
        if (ratio < best - eps || (ratio <= best + eps && leave < m_ && basis_[i] < basis_[leave])) {
          best = ratio;
          leave = i;
        }
      }
      if (leave == m_) return false;
      pivot(leave, enter);
      ++pivots;
    }
  }

 private:
  std::size_t m_, n_;
  std::vector<double> a_;
  std::vector<std::size_t> basis_;
};

}  // namespace detail

inline Solution solve(const LinearProgram& prog, double eps = 1e-10) {
  const std::size_t n = prog.num_vars;
  const std::size_t m = prog.constraints.size();
  if (prog.objective.size() != n) throw std::invalid_argument("lp: objective length mismatch");

  // Column layout: structural | slack/surplus (one per inequality) | artificial.
  std::size_t n_slack = 0;
  std::size_t n_art = 0;
  std::vector<Relation> rel(m);
  std::vector<double> sgn(m, 1.0);
  for (std::size_t i = 0; i < m; ++i) {
    const auto& c = prog.constraints[i];
    if (c.coef.size() != n) throw std::invalid_argument("lp: constraint length mismatch");
    rel[i] = c.rel;
    if (c.rhs < 0.0) {
      sgn[i] = -1.0;
      if (rel[i] == Relation::less_equal) rel[i] = Relation::greater_equal;
      else if (rel[i] == Relation::greater_equal) rel[i] = Relation::less_equal;
    }
    if (rel[i] != Relation::equal) ++n_slack;
    if (rel[i] != Relation::less_equal) ++n_art;
  }
  const std::size_t total = n + n_slack + n_art;
  detail::Tableau tab(m, total);
  std::size_t s = n, a = n + n_slack;
  for (std::size_t i = 0; i < m; ++i) {
    const auto& c = prog.constraints[i];
    for (std::size_t j = 0; j < n; ++j) tab.at(i, j) = sgn[i] * c.coef[j];
    tab.rhs(i) = sgn[i] * c.rhs;
    if (rel[i] == Relation::less_equal) {
      tab.at(i, s) = 1.0;
      tab.basis()[i] = s++;
    } else {
      if (rel[i] == Relation::greater_equal) tab.at(i, s++) = -1.0;
      tab.at(i, a) = 1.0;
      tab.basis()[i] = a++;
    }
  }

  Solution sol;
  std::vector<bool> allowed(total, true);
  if (n_art > 0) {
    std::vector<double> phase1(total, 0.0);
    for (std::size_t j = n + n_slack; j < total; ++j) phase1[j] = -1.0;
    tab.optimize(phase1, allowed, sol.pivots, eps);
    double infeas = 0.0;
    for (std::size_t i = 0; i < m; ++i)
      if (tab.basis()[i] >= n + n_slack) infeas += tab.rhs(i);
    if (infeas > 1e-8) {
      sol.status = Status::infeasible;
      return sol;
    }
    // Drive zero-valued artificials out of the basis where possible.
    for (std::size_t i = 0; i < m; ++i) {
      if (tab.basis()[i] < n + n_slack) continue;
      for (std::size_t j = 0; j < n + n_slack; ++j) {
        if (std::abs(tab.at(i, j)) > 1e-9) {
          tab.pivot(i, j);
          ++sol.pivots;
          break;
        }
      }
    }
    for (std::size_t j = n + n_slack; j < total; ++j) allowed[j] = false;
  }

  std::vector<double> cost(total, 0.0);
  for (std::size_t j = 0; j < n; ++j) cost[j] = prog.objective[j];
  if (!tab.optimize(cost, allowed, sol.pivots, eps)) {
    sol.status = Status::unbounded;
    return sol;
  }
  sol.status = Status::optimal;
  sol.x.assign(n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    if (tab.basis()[i] < n) sol.x[tab.basis()[i]] = std::max(0.0, tab.rhs(i));
  for (std::size_t j = 0; j < n; ++j) sol.objective += prog.objective[j] * sol.x[j];
  return sol;
}

}  // namespace ccfa::lp
