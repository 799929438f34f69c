#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "cpmlho/batch.hpp"
#include "cpmlho/hyper_layer.hpp"
#include "cpmlho/hyper_params.hpp"
#include "cpmlho/rng.hpp"

namespace cpmlho::nn {

enum class Architecture { Mlp, Cnn };
enum class LossKind { CrossEntropy, SquaredError };

std::string to_string(Architecture a);
std::string to_string(LossKind k);

/// Relaxed dropout applied to the input of `layer`, with rate lambda[lambda_index].
struct DropoutSite {
  std::size_t layer = 0;
  std::size_t lambda_index = 0;
};

struct CutoutSite {
  std::size_t holes_index = 0;
  std::size_t length_index = 0;
};

/// Architecture plus the mapping from lambda entries to regularizer sites.
///
/// MLP: 784 -> h1 -> h2 -> 10, three linear layers, ReLU between them.
/// CNN: conv3x3(c1) -> ReLU -> pool2 -> conv3x3(c2) -> ReLU -> pool2 -> linear(10).
/// Dropout site i sits in front of layer i; the CNN also applies soft cutout
/// to its input images.
struct ModelSpec {
  Architecture arch = Architecture::Mlp;
  std::size_t image_side = 28;
  std::size_t channels = 1;
  std::size_t classes = 10;
  std::vector<std::size_t> hidden{300, 100};  // MLP
  std::size_t conv1 = 16, conv2 = 32, kernel = 3;  // CNN
  std::vector<DropoutSite> dropout_sites;
  std::optional<CutoutSite> cutout;

  static ModelSpec mlp(std::vector<std::size_t> hidden = {300, 100});
  static ModelSpec cnn(std::size_t conv1 = 16, std::size_t conv2 = 32);

  std::size_t num_layers() const { return 3; }
  std::size_t num_hyper() const { return dropout_sites.size() + (cutout ? 2 : 0); }

  /// Specs of the lambda entries in index order: dropout0..k, then cutout holes and length.
  std::vector<HyperSpec> hyper_specs(double holes_max, double length_max) const;
};

/// Throws ContractError unless every lambda entry is referenced by exactly one site.
void validate_spec(const ModelSpec& spec);

struct Model {
  ModelSpec spec;
  std::vector<HyperLayerParams> layers;
};

struct InitOptions {
  /// Standard deviation of the gate map w_h1.
  double gate_std = 0.01;
  /// w_h1 starts at zero and stays pinned there when the hypernetwork is off.
  bool hypernet = true;
};

/// He-normal w_e and w_h2, zero bias, small normal w_h1.
Model init_model(const ModelSpec& spec, Rng& rng, const InitOptions& options = {});

/// Which groups become differentiable leaves when a model is bound to a tape.
struct Binding {
  bool weights = true;
  bool lambda = false;
};

struct ModelVars {
  std::vector<HyperLayerVars> layers;
  ad::Var lambda_raw;
};

ModelVars bind(ad::Tape& tape, const Model& model, const HyperParamVector& lambda, Binding binding);

struct ForwardOptions {
  /// Train mode samples dropout and cutout noise; eval mode is deterministic.
  bool train = true;
  double temperature = 0.5;
};

/// Logits [N x classes] for images [N x C x H x W].
ad::Var forward(const Model& model, const ModelVars& vars, const HyperParamVector& lambda, ad::Var images,
                const ForwardOptions& options, Rng& rng);

/// Mean per-example loss on a batch.
ad::Var inner_loss(const Model& model, const ModelVars& vars, const HyperParamVector& lambda, const Batch& batch,
                   LossKind loss, const ForwardOptions& options, Rng& rng);

/// Applies the configured per-example loss to logits.
ad::Var classification_loss(ad::Var logits, const std::vector<int>& labels, LossKind loss);

}  // namespace cpmlho::nn
