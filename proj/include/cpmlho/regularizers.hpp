#pragma once

#include "cpmlho/rng.hpp"
#include "cpmlho/tape.hpp"

namespace cpmlho::nn {

/// Concrete-relaxed dropout. Per unit, with u ~ U(0, 1),
///
///   m = sigmoid((log u - log(1 - u) + log(1 - rate) - log(rate)) / temperature)
///   y = x * m / (1 - rate)
///
/// `rate` is a one-element node in (0, 1); gradients reach it through both
/// the mask and the rescaling. The sampled logistic noise is recorded on the
/// tape as a constant node.
ad::Var relaxed_dropout(ad::Var x, ad::Var rate, double temperature, Rng& rng);

/// Same mask driven by logit(rate). Keeps the keep-probability accurate when
/// the rate is within rounding of 0 or 1; the model uses this form.
ad::Var relaxed_dropout_logit(ad::Var x, ad::Var rate_logit, double temperature, Rng& rng);

/// Width of the smooth edge ramp of a cutout hole, in pixels.
inline constexpr double kCutoutEdgeWidth = 1.0;

/// Differentiable cutout over images [N x C x H x W] (or a single [C x H x W]).
///
/// For each image, ceil(holes) integer centers are drawn uniformly. The first
/// holes have weight 1 and the last has weight holes - (ceil(holes) - 1), so
/// the occluded mass is differentiable in `holes`; at whole numbers the
/// gradient is the one-sided slope from below. A hole is the product of
/// two 1-D soft boxes of nominal width `length` whose edges are smoothstep
/// ramps one pixel wide, so it is differentiable in `length` and exactly zero
/// outside its support. Holes combine as a union: y = x * prod_k (1 - w_k m_k).
///
/// holes == 0 returns the input node itself.
///
/// `draws` candidate centers are taken from `rng` per image whatever the hole
/// count (at least ceil(holes)), so later draws on the same stream do not
/// shift when the count crosses a whole number.
ad::Var soft_cutout(ad::Var images, ad::Var holes, ad::Var length, Rng& rng, std::size_t draws = 0);

/// 1-D soft box profile at signed offset d from the center, and its
/// derivative with respect to the length.
double cutout_profile(double d, double length);
double cutout_profile_dlength(double d, double length);

}  // namespace cpmlho::nn
