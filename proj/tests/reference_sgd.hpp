#pragma once

// Plain three-layer network trained by plain SGD, written against the raw ops
// only. Replays a run's batch order and noise draws so it can be compared
// step for step with a hypernet-off, cuts-off, theta = 0 run.

#include <vector>

#include "cpmlho/data.hpp"
#include "cpmlho/ops.hpp"
#include "cpmlho/regularizers.hpp"
#include "cpmlho/train.hpp"

namespace cpmlho::testing {

struct ReferenceRun {
  std::vector<double> train_losses;
  std::vector<std::vector<double>> lambdas;
  std::vector<Tensor> w, b;
};

inline ad::Var plain_loss(ad::Tape& tape, const std::vector<ad::Var>& w, const std::vector<ad::Var>& b, ad::Var lam,
                          const Batch& batch, double temperature, Rng& noise) {
  const std::size_t n = batch.size();
  ad::Var h = ad::reshape(tape.constant(batch.x), {n, batch.x.numel() / n});
  for (std::size_t i = 0; i < 3; ++i) {
    h = nn::relaxed_dropout_logit(h, ad::select(lam, i), temperature, noise);
    h = ad::add_bias(ad::matmul(h, ad::transpose(w[i])), b[i]);
    if (i < 2) h = ad::relu(h);
  }
  return ad::softmax_cross_entropy(h, batch.y);
}

/// MLP only. Weights start from the run's own initial state.
inline ReferenceRun plain_sgd(const nn::ModelSpec& spec, const train::TrainConfig& c, const data::ImageDataset& source,
                              const data::Split& split) {
  const train::State init = train::init_state(spec, c);
  ReferenceRun out;
  for (const auto& l : init.model.layers) {
    out.w.push_back(l.w_e);
    out.b.push_back(l.bias);
  }
  Tensor lam = init.lambda.raw();
  const auto specs = init.lambda.specs();
  const train::SeedPlan seeds{c.seed};
  data::BatchStream outer_train(split.train, c.batch_size, seeds.outer_train_stream());
  data::BatchStream outer_val(split.val, c.batch_size, seeds.outer_val_stream());
  std::size_t step = 0, outer = 0;
  for (std::size_t epoch = 0; epoch < c.epochs; ++epoch) {
    for (const auto& idx : data::epoch_batches(split.train, c.batch_size, seeds.epoch_order(epoch))) {
      {
        ad::Tape tape;
        std::vector<ad::Var> w, b;
        for (std::size_t i = 0; i < 3; ++i) {
          w.push_back(tape.leaf(out.w[i]));
          b.push_back(tape.leaf(out.b[i]));
        }
        Rng noise(seeds.inner_noise(step));
        ad::Gradients g =
            ad::backward(tape, plain_loss(tape, w, b, tape.constant(lam), source.gather(idx), c.temperature, noise));
        for (std::size_t i = 0; i < 3; ++i) {
          out.w[i].axpy_(-c.lr_we, g[w[i]]);
          out.b[i].axpy_(-c.lr_we, g[b[i]]);
        }
      }
      ++step;
      if (step % c.inner_steps_per_outer != 0) continue;
      ad::Tape tape;
      std::vector<ad::Var> w, b;
      for (std::size_t i = 0; i < 3; ++i) {
        w.push_back(tape.constant(out.w[i]));
        b.push_back(tape.constant(out.b[i]));
      }
      ad::Var lv = tape.leaf(lam);
      Rng noise(seeds.outer_noise(outer));
      const Batch tb = source.gather(outer_train.next());
      outer_val.next();
      ad::Var loss = plain_loss(tape, w, b, lv, tb, c.temperature, noise);
      lam.axpy_(-c.lr_lambda, ad::backward(tape, loss)[lv]);
      out.train_losses.push_back(loss.value().item());
      std::vector<double> constrained;
      for (std::size_t i = 0; i < specs.size(); ++i) {
        constrained.push_back(nn::HyperParamVector::to_constrained(specs[i], lam[i]));
      }
      out.lambdas.push_back(std::move(constrained));
      ++outer;
    }
  }
  return out;
}

}  // namespace cpmlho::testing
