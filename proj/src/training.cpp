#include "constraintnet/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ostream>

#include "constraintnet/errors.hpp"

namespace cnet {

void TrainReport::write_csv(std::ostream& out) const {
    out << "epoch,train_loss,val_loss,invariance,seconds\n";
    char buf[256];
    for (const auto& e : epochs) {
        std::snprintf(buf, sizeof(buf), "%zu,%.17g,%.17g,%.17g,%.6f\n", e.epoch, e.train_loss,
                      e.val_loss, e.invariance, e.seconds);
        out << buf;
    }
}

nlohmann::json TrainReport::to_json() const {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& e : epochs) {
        arr.push_back({{"epoch", e.epoch},
                       {"train_loss", e.train_loss},
                       {"val_loss", e.val_loss},
                       {"invariance", e.invariance},
                       {"seconds", e.seconds}});
    }
    return nlohmann::json{{"epochs", arr}};
}

namespace {

struct AdamState {
    std::vector<Tensor> m;
    std::vector<Tensor> v;
    std::size_t step = 0;
};

double sum_squared_weights(const ConstraintNetModel& model) {
    double acc = 0.0;
    for (const auto& p : model.parameters()) {
        if (p.no_decay) continue;
        for (double w : p.value().vec()) acc += w * w;
    }
    return acc;
}

void apply_update(ConstraintNetModel& model, const TrainConfig& cfg, AdamState& adam) {
    auto& params = model.parameters();
    if (cfg.weight_decay > 0.0) {
        for (auto& p : params) {
            if (p.no_decay) continue;
            for (std::size_t i = 0; i < p.value().size(); ++i) {
                p.grad()[i] += 2.0 * cfg.weight_decay * p.value()[i];
            }
        }
    }
    if (cfg.optimizer == OptimizerKind::sgd) {
        for (auto& p : params) {
            for (std::size_t i = 0; i < p.value().size(); ++i) {
                p.value()[i] -= cfg.learning_rate * p.grad()[i];
            }
        }
        return;
    }
    adam.step += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(adam.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(adam.step));
    for (std::size_t k = 0; k < params.size(); ++k) {
        auto& p = params[k];
        Tensor& m = adam.m[k];
        Tensor& v = adam.v[k];
        for (std::size_t i = 0; i < p.value().size(); ++i) {
            const double g = p.grad()[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            p.value()[i] -= cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.adam_eps);
        }
    }
}

double mse(const Tensor& a, const Tensor& b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        acc += d * d;
    }
    return acc / static_cast<double>(a.size());
}

ConstraintSpec checked_sample(const ConstraintSampler& sampler, std::size_t index, const Tensor& y,
                              Rng& rng) {
    ConstraintSpec spec = sampler(index, y, rng);
    if (!member(y, spec, 0.0)) {
        throw UsageError("constraint sampler produced a region that does not contain the label of "
                         "sample " +
                         std::to_string(index));
    }
    return spec;
}

}  // namespace

TrainReport train(ConstraintNetModel& model, const std::vector<Sample>& train_set,
                  const std::vector<Sample>& val_set, const ConstraintSampler& sampler,
                  const TrainConfig& cfg) {
    if (train_set.empty()) throw UsageError("training set is empty");
    if (cfg.batch_size == 0) throw UsageError("batch size must be positive");

    Rng rng_shuffle = Rng::stream(cfg.seed, "train/shuffle");
    Rng rng_sample = Rng::stream(cfg.seed, "train/constraints");
    Rng rng_val = Rng::stream(cfg.seed, "train/validation");
    Rng rng_report = Rng::stream(cfg.seed, "train/report");

    // Fixed validation triples: constraints drawn once.
    std::vector<ConstraintSpec> val_specs;
    val_specs.reserve(val_set.size());
    for (std::size_t i = 0; i < val_set.size(); ++i) {
        val_specs.push_back(checked_sample(sampler, i, val_set[i].y, rng_val));
    }

    std::vector<ConstraintSpec> fixed_specs;
    if (!cfg.resample_per_epoch) {
        Rng rng_fixed = Rng::stream(cfg.seed, "train/fixed");
        fixed_specs.reserve(train_set.size());
        for (std::size_t i = 0; i < train_set.size(); ++i) {
            fixed_specs.push_back(checked_sample(sampler, i, train_set[i].y, rng_fixed));
        }
    }

    AdamState adam;
    if (cfg.optimizer == OptimizerKind::adam) {
        for (const auto& p : model.parameters()) {
            adam.m.emplace_back(p.value().shape());
            adam.v.emplace_back(p.value().shape());
        }
    }

    TrainReport report;
    std::vector<std::size_t> order(train_set.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        // Fisher-Yates with the run's shuffle stream.
        for (std::size_t i = order.size(); i-- > 1;) {
            std::size_t j = rng_shuffle.uniform_int(i + 1);
            std::swap(order[i], order[j]);
        }

        double epoch_loss = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t end = std::min(start + cfg.batch_size, order.size());
            Tape tape;
            Value total;
            for (std::size_t k = start; k < end; ++k) {
                const std::size_t idx = order[k];
                const Sample& sample = train_set[idx];
                ConstraintSpec spec = cfg.resample_per_epoch
                                          ? checked_sample(sampler, idx, sample.y, rng_sample)
                                          : fixed_specs[idx];
                Value pred = model.forward_on(tape, sample.x, spec.params());
                Value loss = tape.mse_loss(pred, tape.input(sample.y));
                total = total.valid() ? tape.add_broadcast(total, loss) : loss;
            }
            Value batch_loss = tape.scale(total, 1.0 / static_cast<double>(end - start));
            const double data_loss = tape.value(batch_loss)[0];
            tape.backward(batch_loss);
            apply_update(model, cfg, adam);
            epoch_loss += data_loss + cfg.weight_decay * sum_squared_weights(model);
            batches += 1;
        }

        EpochRecord rec;
        rec.epoch = epoch;
        rec.train_loss = epoch_loss / static_cast<double>(batches);

        double val_loss = 0.0;
        for (std::size_t i = 0; i < val_set.size(); ++i) {
            Tensor pred = model.forward(val_set[i].x, val_specs[i].params());
            val_loss += mse(pred, val_set[i].y);
        }
        rec.val_loss = val_set.empty() ? 0.0 : val_loss / static_cast<double>(val_set.size());

        const std::size_t inv_n = std::min(cfg.report_invariance_samples, val_set.size());
        if (inv_n > 0 && cfg.report_invariance_draws >= 2) {
            double acc = 0.0;
            for (std::size_t i = 0; i < inv_n; ++i) {
                acc += invariance_metric(model, val_set[i].x, val_set[i].y, sampler,
                                         cfg.report_invariance_draws, rng_report);
            }
            rec.invariance = acc / static_cast<double>(inv_n);
        }

        rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        report.epochs.push_back(rec);
    }
    return report;
}

double invariance_metric(const ConstraintNetModel& model, const Tensor& x, const Tensor& y,
                         const ConstraintSampler& sampler, std::size_t n_draws, Rng& rng) {
    if (n_draws < 2) throw UsageError("invariance metric needs at least two draws");
    const std::size_t dim = model.output_size();
    std::vector<double> sum(dim, 0.0), sumsq(dim, 0.0);
    std::vector<Tensor> preds;
    preds.reserve(n_draws);
    for (std::size_t d = 0; d < n_draws; ++d) {
        ConstraintSpec spec = sampler(0, y, rng);
        preds.push_back(model.forward(x, spec.params()));
    }
    for (const auto& p : preds) {
        for (std::size_t c = 0; c < dim; ++c) sum[c] += p[c];
    }
    double worst = 0.0;
    for (std::size_t c = 0; c < dim; ++c) {
        const double mean = sum[c] / static_cast<double>(n_draws);
        double var = 0.0;
        for (const auto& p : preds) var += (p[c] - mean) * (p[c] - mean);
        var /= static_cast<double>(n_draws);
        worst = std::max(worst, std::sqrt(var));
    }
    return worst;
}

EvalResult evaluate(const ConstraintNetModel& model, const std::vector<Sample>& dataset,
                    const ConstraintSampler& sampler, Rng& rng) {
    if (dataset.empty()) throw UsageError("evaluation set is empty");
    EvalResult result;
    result.mae.assign(model.output_size(), 0.0);
    for (std::size_t i = 0; i < dataset.size(); ++i) {
        const Sample& sample = dataset[i];
        ConstraintSpec spec = checked_sample(sampler, i, sample.y, rng);
        Tensor pred = model.forward(sample.x, spec.params());
        if (!member(pred, spec, 1e-9)) {
            throw InvariantViolation("model output escaped its constraint region at sample " +
                                         std::to_string(i),
                                     sample.x.vec(), spec.params(), pred.vec());
        }
        result.mean_loss += mse(pred, sample.y);
        for (std::size_t c = 0; c < pred.size(); ++c) {
            result.mae[c] += std::abs(pred[c] - sample.y[c]);
        }
    }
    result.mean_loss /= static_cast<double>(dataset.size());
    for (auto& v : result.mae) v /= static_cast<double>(dataset.size());
    return result;
}

}  // namespace cnet
