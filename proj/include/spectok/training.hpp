#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "spectok/config.hpp"
#include "spectok/errors.hpp"
#include "spectok/format.hpp"
#include "spectok/model.hpp"
#include "spectok/rng.hpp"
#include "spectok/tensor.hpp"

namespace spectok {

// ==================== Toy data ====================

struct Sample {
  Tensor image;  // [C, H, W]
  int label = 0;
};

// Quadrant classification: every pixel carries Gaussian noise and one of the
// four image quadrants is shifted up by a constant; the label is the index
// of the elevated quadrant (0 top-left, 1 top-right, 2 bottom-left,
// 3 bottom-right). Samples are generated on demand and random-access: sample
// i of either split is fully determined by (seed, split, i).
//
// Train labels cycle 0,1,2,3 with the index, so any batch whose size is a
// multiple of 4 is exactly class-balanced; with balanced batches the
// label-independent component of the head gradient cancels instead of
// swamping the class signal. Eval labels are drawn uniformly at random.
struct ToyTask {
  std::uint64_t seed = 0;
  int image_size = 16;
  int channels = 1;
  double noise_std = 0.3;
  double shift = 1.0;

  Sample make_sample(const std::string& split, int index) const {
    if (image_size < 2 || image_size % 2 != 0) {
      throw ConfigError("ToyTask: image size must be even and >= 2, got " +
                        std::to_string(image_size));
    }
    Rng rng = Rng::keyed(seed, split + ":" + std::to_string(index));
    // Both splits consume the label draw so the pixel-noise stream for a
    // given index does not depend on how the label was chosen.
    int label = static_cast<int>(rng.next_below(4));
    if (split == "train") label = index % 4;
    const int s = image_size;
    const int half = s / 2;
    std::vector<double> pixels(static_cast<std::size_t>(channels) * s * s);
    for (int c = 0; c < channels; ++c) {
      for (int y = 0; y < s; ++y) {
        for (int x = 0; x < s; ++x) {
          int quadrant = (y >= half ? 2 : 0) + (x >= half ? 1 : 0);
          double v = rng.normal(0.0, noise_std);
          if (quadrant == label) v += shift;
          pixels[(static_cast<std::size_t>(c) * s + y) * s + x] = v;
        }
      }
    }
    Sample sample;
    sample.image = Tensor({static_cast<std::size_t>(channels),
                           static_cast<std::size_t>(s),
                           static_cast<std::size_t>(s)},
                          std::move(pixels));
    sample.label = label;
    return sample;
  }

  Sample train_sample(int index) const { return make_sample("train", index); }
  Sample eval_sample(int index) const { return make_sample("eval", index); }
};

// ==================== Loss ====================

// Classification logits for one forward result: the linear head applied to
// the final CLS embedding.
inline Tensor cls_logits(const VitModel& model, const ForwardResult& fwd) {
  Tensor row = reshape(fwd.cls_out, {1, fwd.cls_out.size()});
  return linear_apply(model.head, row);
}

// Cross-entropy of the CLS head over the batch, plus w_aux times the mean
// squared error of reconstructing each patch's raw pixels from its final
// embedding. The auxiliary term keeps the patch pathway trained instead of
// letting every gradient arrive through the class token alone.
inline Tensor loss_forward(const VitModel& model,
                           const std::vector<Sample>& batch, double w_aux) {
  if (batch.empty()) throw ContractError("loss_forward: empty batch");
  if (w_aux < 0) throw ContractError("loss_forward: w_aux must be >= 0");
  std::vector<Tensor> logit_rows;
  std::vector<int> labels;
  logit_rows.reserve(batch.size());
  std::optional<Tensor> aux_sum;
  for (const Sample& sample : batch) {
    ForwardResult fwd = model_forward(model, sample.image);
    logit_rows.push_back(cls_logits(model, fwd));
    labels.push_back(sample.label);
    if (w_aux > 0) {
      Tensor recon = linear_apply(model.aux_head, fwd.patch_out);
      Tensor target = patchify(sample.image, model.config.patch_size);
      Tensor diff = sub(recon, target);
      Tensor mse = mean(mul(diff, diff));
      aux_sum = aux_sum ? add(*aux_sum, mse) : mse;
    }
  }
  Tensor loss = cross_entropy_mean(concat_rows(logit_rows), labels);
  if (aux_sum) {
    loss = add(loss, scale(*aux_sum, w_aux / static_cast<double>(batch.size())));
  }
  return loss;
}

// ==================== Optimizer ====================

struct OptimState {
  double lr = 0.05;
  double momentum = 0.9;
  // One velocity buffer per parameter tensor, keyed by registry name and
  // allocated lazily on the first step.
  std::map<std::string, std::vector<double>> buffers;
};

// Classic momentum SGD: b <- mu*b + g, p <- p - lr*b. With mu = 0 the
// buffer drops out and the update is plain gradient descent.
inline void sgd_step(VitModel& model, OptimState& state) {
  for (auto& entry : model.params) {
    Tensor& p = entry.tensor;
    if (!p.has_grad()) {
      throw ContractError("sgd_step: parameter " + entry.name +
                          " has no gradient");
    }
    const std::vector<double>& g = p.grad();
    std::vector<double>& data = p.data();
    if (state.momentum > 0) {
      std::vector<double>& buf = state.buffers[entry.name];
      if (buf.empty()) buf.assign(data.size(), 0.0);
      for (std::size_t i = 0; i < data.size(); ++i) {
        buf[i] = state.momentum * buf[i] + g[i];
        data[i] -= state.lr * buf[i];
      }
    } else {
      for (std::size_t i = 0; i < data.size(); ++i) {
        data[i] -= state.lr * g[i];
      }
    }
  }
}

// ==================== Training loop ====================

struct TrainOptions {
  int steps = 300;
  int batch_size = 16;
  double lr = 0.05;
  double momentum = 0.9;
  double w_aux = 0.1;
  int eval_every = 0;  // 0: evaluate only after the final step
  int eval_size = 64;
  std::uint64_t seed = 0;  // model init; the data stream comes from the task
};

struct TrainResult {
  std::vector<double> losses;        // one entry per optimization step
  std::map<int, double> evals;       // step index -> eval accuracy
  double final_accuracy = 0.0;       // accuracy after the last step
};

inline double evaluate(const VitModel& model, const ToyTask& task,
                       int eval_size) {
  if (eval_size <= 0) throw ContractError("evaluate: eval_size must be > 0");
  int correct = 0;
  for (int i = 0; i < eval_size; ++i) {
    Sample sample = task.eval_sample(i);
    ForwardResult fwd = model_forward(model, sample.image);
    Tensor logits = cls_logits(model, fwd);
    int best = 0;
    for (std::size_t j = 1; j < logits.size(); ++j) {
      if (logits.data()[j] > logits.data()[best]) best = static_cast<int>(j);
    }
    correct += (best == sample.label);
  }
  return static_cast<double>(correct) / eval_size;
}

// Deterministic toy training: step t consumes train samples
// [t*batch, (t+1)*batch), so the whole run is a pure function of
// (config, task, options). A non-finite loss aborts with the step index.
// When out_model is given, the trained model is moved into it afterwards
// (for checkpointing).
inline TrainResult train_toy(const ModelConfig& config, const ToyTask& task,
                             const TrainOptions& options,
                             VitModel* out_model = nullptr) {
  if (task.image_size != config.image_size ||
      task.channels != config.in_channels) {
    throw ConfigError("train_toy: task images (" +
                      std::to_string(task.channels) + "x" +
                      std::to_string(task.image_size) + "x" +
                      std::to_string(task.image_size) +
                      ") do not match the model's input shape");
  }
  VitModel model = build_model(config, options.seed);
  // The classifier head starts from zero. Its first gradient is then purely
  // class-conditional: a randomly initialized head instead starts with an
  // O(1) label-independent logit offset per class that the tiny class signal
  // in the CLS embedding would have to climb over. Argmax accuracy depends
  // on the head's direction, not its scale, so alignment is what matters.
  for (double& v : model.head.weight.data()) v = 0.0;
  for (double& v : model.head.bias.data()) v = 0.0;
  OptimState state;
  state.lr = options.lr;
  state.momentum = options.momentum;
  TrainResult result;
  result.losses.reserve(options.steps);
  for (int step = 0; step < options.steps; ++step) {
    std::vector<Sample> batch;
    batch.reserve(options.batch_size);
    for (int b = 0; b < options.batch_size; ++b) {
      batch.push_back(task.train_sample(step * options.batch_size + b));
    }
    model.zero_grad();
    Tensor loss = loss_forward(model, batch, options.w_aux);
    double value = loss.item();
    if (!std::isfinite(value)) {
      throw DivergenceError(step, "train_toy: non-finite loss at step " +
                                      std::to_string(step));
    }
    backward(loss);
    sgd_step(model, state);
    result.losses.push_back(value);
    bool last = step + 1 == options.steps;
    if (last || (options.eval_every > 0 &&
                 (step + 1) % options.eval_every == 0)) {
      result.evals[step] = evaluate(model, task, options.eval_size);
    }
  }
  result.final_accuracy = result.evals.empty()
                              ? evaluate(model, task, options.eval_size)
                              : result.evals.rbegin()->second;
  if (out_model != nullptr) *out_model = std::move(model);
  return result;
}

// Loss curve CSV: one row per step; the eval column is filled only at steps
// where an evaluation ran.
inline void write_loss_csv(std::ostream& os, const TrainResult& result) {
  os << "step,loss,eval_acc\n";
  for (std::size_t step = 0; step < result.losses.size(); ++step) {
    os << step << ',' << detail::fmt_double(result.losses[step]) << ',';
    auto it = result.evals.find(static_cast<int>(step));
    if (it != result.evals.end()) os << detail::fmt_double(it->second);
    os << '\n';
  }
}

// ==================== Whole-model gradient check ====================

struct ModelGradCheck {
  double max_rel_error = 0.0;
  std::string worst_param;
};

// Central-difference check of the full training loss over every parameter
// coordinate of a freshly built model — CLS paths, patch paths, LoRA
// factors, attention biases, registers, heads, all of it. Intended for tiny
// models only (the sweep is two forward passes per coordinate); callers
// guard the size.
//
// The error metric is |fd - ad| / (|fd| + |ad| + 1e-5). The additive floor
// reflects what double-precision central differences can certify: the loss
// evaluates with ~1e-16 relative noise, so fd carries ~1e-11 absolute noise
// at eps = 1e-5, and coordinates whose true gradient sits near that floor
// (q/k columns are suppressed by the 0.02^2 init scale) would otherwise
// compare pure roundoff against itself. Below the floor the comparison is
// effectively absolute; above it, relative. A systematic error — wrong
// factor, dropped term, sign flip — still scores >= 1e-3 on any coordinate
// with gradient magnitude down to 1e-8, far above the 1e-4 gate.
inline ModelGradCheck grad_check_model(const ModelConfig& config,
                                       std::uint64_t seed,
                                       bool break_gradient = false,
                                       double eps = 1e-5) {
  VitModel model = build_model(config, seed);
  ToyTask task;
  task.seed = seed;
  task.image_size = config.image_size;
  task.channels = config.in_channels;
  std::vector<Sample> batch = {task.train_sample(0), task.train_sample(1)};
  const double w_aux = 0.1;

  model.zero_grad();
  Tensor loss = loss_forward(model, batch, w_aux);
  backward(loss);

  ModelGradCheck out;
  for (auto& entry : model.params) {
    std::vector<double> analytic = entry.tensor.grad();
    if (break_gradient) {
      for (double& g : analytic) g *= 1.02;
    }
    std::vector<double>& data = entry.tensor.data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double saved = data[i];
      data[i] = saved + eps;
      double plus = loss_forward(model, batch, w_aux).item();
      data[i] = saved - eps;
      double minus = loss_forward(model, batch, w_aux).item();
      data[i] = saved;
      double fd = (plus - minus) / (2 * eps);
      double rel = std::fabs(fd - analytic[i]) /
                   (std::fabs(fd) + std::fabs(analytic[i]) + 1e-5);
      if (rel > out.max_rel_error) {
        out.max_rel_error = rel;
        out.worst_param = entry.name;
      }
    }
  }
  return out;
}

}  // namespace spectok
