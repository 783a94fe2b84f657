#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <vector>

#include <json.hpp>

#include "constraintnet/constraints.hpp"
#include "constraintnet/model.hpp"
#include "constraintnet/rng.hpp"

namespace cnet {

enum class OptimizerKind { sgd, adam };

struct TrainConfig {
    std::size_t epochs = 20;
    std::size_t batch_size = 32;
    double learning_rate = 1e-3;
    OptimizerKind optimizer = OptimizerKind::adam;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double weight_decay = 0.0;  // coefficient of the squared-L2 penalty
    std::uint64_t seed = 0;
    // Draw a fresh constraint parameter every time a sample is visited; when
    // false, each sample keeps the parameter drawn on its first visit.
    bool resample_per_epoch = true;
    // Epoch-report instrumentation (validation subset for the spread metric).
    std::size_t report_invariance_samples = 20;
    std::size_t report_invariance_draws = 10;
};

struct EpochRecord {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
    double invariance = 0.0;
    double seconds = 0.0;
};

struct TrainReport {
    std::vector<EpochRecord> epochs;

    void write_csv(std::ostream& out) const;
    nlohmann::json to_json() const;
};

struct Sample {
    Tensor x;
    Tensor y;
};

// Draws a constraint containing the label of sample `index`. The index lets
// tasks with state-dependent constraints look up per-sample context.
using ConstraintSampler = std::function<ConstraintSpec(std::size_t index, const Tensor& y, Rng&)>;

// Mini-batch gradient training with per-sample constraint resampling inside
// the loop. Validation constraints are drawn once up front and kept fixed so
// epoch numbers are comparable. Reproducible from config.seed.
TrainReport train(ConstraintNetModel& model, const std::vector<Sample>& train_set,
                  const std::vector<Sample>& val_set, const ConstraintSampler& sampler,
                  const TrainConfig& config);

// Maximum per-component standard deviation of the prediction for one input
// across n_draws valid constraints.
double invariance_metric(const ConstraintNetModel& model, const Tensor& x, const Tensor& y,
                         const ConstraintSampler& sampler, std::size_t n_draws, Rng& rng);

struct EvalResult {
    double mean_loss = 0.0;
    std::vector<double> mae;          // per output component
    std::size_t membership_violations = 0;  // always 0; a violation throws instead
};

// Mean loss and per-component absolute error under freshly sampled
// constraints. A membership violation is a library bug and throws
// InvariantViolation with the offending triple.
EvalResult evaluate(const ConstraintNetModel& model, const std::vector<Sample>& dataset,
                    const ConstraintSampler& sampler, Rng& rng);

}  // namespace cnet
