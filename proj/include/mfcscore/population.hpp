#pragma once

// Mean-field coupling carriers: the plain PopulationState used by pointwise
// problem functions, and PopulationExpr, its lazily recorded tape
// counterpart used inside rollouts.

#include <cstddef>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "mfcscore/kde.hpp"
#include "mfcscore/tape.hpp"

namespace mfcscore {

struct PopulationState {
  std::vector<double> samples;  // N x dim
  std::vector<double> mean;
  KdeCloud kde;

  std::size_t dim() const { return mean.size(); }
  std::size_t size() const { return kde.size(); }
};

/// Empirical mean and KDE cloud of one time slice of particles.
inline PopulationState population_state(std::span<const double> states, std::size_t dim,
                                        double bandwidth) {
  if (dim == 0 || states.size() % dim != 0 || states.empty()) {
    throw std::invalid_argument("population: need at least one particle");
  }
  const std::size_t n = states.size() / dim;
  PopulationState pop;
  pop.samples.assign(states.begin(), states.end());
  pop.mean.assign(dim, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < dim; ++k) pop.mean[k] += states[i * dim + k];
  }
  for (double& m : pop.mean) m /= static_cast<double>(n);
  pop.kde = KdeCloud(pop.samples, dim, bandwidth);
  return pop;
}

/// Population quantities of a recorded particle slice. Each quantity is
/// recorded on first use. With `detach`, KDE outputs are tape constants.
class PopulationExpr {
 public:
  PopulationExpr(tape::Recording& rec, tape::ExprId states, std::size_t dim, double bandwidth,
                 bool detach)
      : rec_(&rec), states_(states), dim_(dim), bandwidth_(bandwidth), detach_(detach) {
    const auto v = rec.value(states);
    if (dim == 0 || v.empty() || v.size() % dim != 0) {
      throw std::invalid_argument("population: bad particle slice");
    }
    count_ = v.size() / dim;
  }

  tape::Recording& recording() const { return *rec_; }
  tape::ExprId states() const { return states_; }
  std::size_t dim() const { return dim_; }
  std::size_t count() const { return count_; }
  double bandwidth() const { return bandwidth_; }

  tape::ExprId mean() {
    if (!mean_) mean_ = rec_->mean_rows(states_, dim_);
    return *mean_;
  }
  /// The mean repeated for every particle (N x dim).
  tape::ExprId mean_per_particle() {
    if (!mean_rows_) mean_rows_ = rec_->broadcast_rows(mean(), count_);
    return *mean_rows_;
  }
  tape::ExprId score() {
    if (!score_) {
      score_ = record_score(*rec_, states_, states_, dim_, bandwidth_, detach_,
                            std::move(self().score));
    }
    return *score_;
  }
  tape::ExprId log_density() {
    if (!log_density_) {
      log_density_ = record_log_density(*rec_, states_, states_, dim_, bandwidth_, detach_,
                                        std::move(self().log_density));
    }
    return *log_density_;
  }

  /// Replaces the KDE by externally supplied score and log-density values
  /// (recorded as constants), e.g. from an exact-solution oracle.
  void use_fixed_density(std::vector<double> score, std::vector<double> log_density) {
    score_ = rec_->constant(std::move(score));
    log_density_ = rec_->constant(std::move(log_density));
  }

  /// Plain snapshot for pointwise evaluation.
  PopulationState snapshot() const { return population_state(rec_->value(states_), dim_, bandwidth_); }

 private:
  // Both KDE outputs come from one pass; each is moved out on first use.
  SelfEvaluation& self() {
    if (!self_) {
      const auto v = rec_->value(states_);
      self_ = self_evaluate(KdeCloud(std::vector<double>(v.begin(), v.end()), dim_, bandwidth_));
    }
    return *self_;
  }

  tape::Recording* rec_;
  tape::ExprId states_;
  std::size_t dim_;
  std::size_t count_ = 0;
  double bandwidth_;
  bool detach_;
  std::optional<tape::ExprId> mean_, mean_rows_, score_, log_density_;
  std::optional<SelfEvaluation> self_;
};

}  // namespace mfcscore
