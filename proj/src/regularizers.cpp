#include "cpmlho/regularizers.hpp"

#include <cmath>

#include "cpmlho/errors.hpp"
#include "cpmlho/ops.hpp"

namespace cpmlho::nn {

namespace {

ad::Var logistic_noise(ad::Var x, double temperature, Rng& rng) {
  if (!(temperature > 0.0)) throw ContractError("relaxed_dropout: temperature must be positive");
  Tensor noise(x.shape());
  for (double& v : noise.data()) {
    const double u = rng.uniform_open();
    v = std::log(u) - std::log1p(-u);
  }
  return x.tape()->constant(std::move(noise), "dropout_noise");
}

}  // namespace

ad::Var relaxed_dropout(ad::Var x, ad::Var rate, double temperature, Rng& rng) {
  const double p = rate.value().item();
  if (!(p > 0.0 && p < 1.0)) throw ContractError("relaxed_dropout: rate " + std::to_string(p) + " outside (0, 1)");
  ad::Var z = logistic_noise(x, temperature, rng);
  ad::Var keep = 1.0 - rate;
  ad::Var logit_keep = ad::log(keep) - ad::log(rate);
  ad::Var mask = ad::sigmoid(ad::scale(z + logit_keep, 1.0 / temperature));
  return (x * mask) / keep;
}

ad::Var relaxed_dropout_logit(ad::Var x, ad::Var rate_logit, double temperature, Rng& rng) {
  if (!std::isfinite(rate_logit.value().item())) throw ContractError("relaxed_dropout: rate logit is not finite");
  ad::Var z = logistic_noise(x, temperature, rng);
  ad::Var keep = ad::sigmoid(-rate_logit);
  ad::Var mask = ad::sigmoid(ad::scale(z - rate_logit, 1.0 / temperature));
  return (x * mask) / keep;
}

namespace {

// Smoothstep from 0 at t = -w/2 to 1 at t = +w/2.
double ramp(double t) {
  const double s = t / kCutoutEdgeWidth + 0.5;
  if (s <= 0.0) return 0.0;
  if (s >= 1.0) return 1.0;
  return s * s * (3.0 - 2.0 * s);
}

double ramp_slope(double t) {
  const double s = t / kCutoutEdgeWidth + 0.5;
  if (s <= 0.0 || s >= 1.0) return 0.0;
  return 6.0 * s * (1.0 - s) / kCutoutEdgeWidth;
}

}  // namespace

double cutout_profile(double d, double length) { return ramp(0.5 * length - d) - ramp(-0.5 * length - d); }

double cutout_profile_dlength(double d, double length) {
  return 0.5 * ramp_slope(0.5 * length - d) + 0.5 * ramp_slope(-0.5 * length - d);
}

namespace {

struct CutoutGeometry {
  std::size_t n, c, h, w, holes;
};


}  // namespace

ad::Var soft_cutout(ad::Var images, ad::Var holes, ad::Var length, Rng& rng, std::size_t draws) {
  const Tensor& xv = images.value();
  if (xv.rank() != 3 && xv.rank() != 4) {
    throw DimensionError("soft_cutout: expected [C x H x W] or [N x C x H x W], got " + shape_to_string(xv.shape()));
  }
  const double hv = holes.value().item();
  const double lv = length.value().item();
  if (!(hv >= 0.0) || !(lv >= 0.0)) throw ContractError("soft_cutout: holes and length must be nonnegative");

  const bool batched = xv.rank() == 4;
  CutoutGeometry g{batched ? xv.dim(0) : 1, xv.dim(batched ? 1 : 0), xv.dim(batched ? 2 : 1),
                   xv.dim(batched ? 3 : 2), static_cast<std::size_t>(std::ceil(hv))};
  if (lv > static_cast<double>(std::min(g.h, g.w))) {
    throw ContractError("soft_cutout: length " + std::to_string(lv) + " exceeds the image side");
  }

  // Centers skip the outermost pixel ring when the plane allows it.
  auto draw = [&rng](std::size_t extent) {
    return extent > 2 ? 1.0 + static_cast<double>(rng.below(extent - 2)) : static_cast<double>(rng.below(extent));
  };
  const std::size_t per_image = std::max(draws, g.holes);
  Tensor centers({g.n, std::max<std::size_t>(g.holes, 1), 2});
  for (std::size_t a = 0; a < g.n; ++a) {
    for (std::size_t k = 0; k < per_image; ++k) {
      const double cy = draw(g.h), cx = draw(g.w);
      if (k >= g.holes) continue;
      centers[(a * g.holes + k) * 2 + 0] = cy;
      centers[(a * g.holes + k) * 2 + 1] = cx;
    }
  }
  if (hv == 0.0) return images;

  // the last hole carries the fractional weight, in (0, 1]
  std::vector<double> weights(g.holes, 1.0);
  weights.back() = hv - static_cast<double>(g.holes - 1);

  // Per image the keep factor prod_k (1 - w_k m_k) over the H x W plane.
  const std::size_t plane = g.h * g.w;
  Tensor keep({g.n, plane}, 1.0);
  for (std::size_t a = 0; a < g.n; ++a) {
    for (std::size_t k = 0; k < g.holes; ++k) {
      const double cy = centers[(a * g.holes + k) * 2 + 0];
      const double cx = centers[(a * g.holes + k) * 2 + 1];
      for (std::size_t i = 0; i < g.h; ++i) {
        const double py = cutout_profile(static_cast<double>(i) - cy, lv);
        if (py == 0.0) continue;
        for (std::size_t j = 0; j < g.w; ++j) {
          const double px = cutout_profile(static_cast<double>(j) - cx, lv);
          keep[a * plane + i * g.w + j] *= 1.0 - weights[k] * py * px;
        }
      }
    }
  }

  Tensor out(xv.shape());
  for (std::size_t a = 0; a < g.n; ++a) {
    for (std::size_t ch = 0; ch < g.c; ++ch) {
      const std::size_t base = (a * g.c + ch) * plane;
      for (std::size_t p = 0; p < plane; ++p) out[base + p] = xv[base + p] * keep[a * plane + p];
    }
  }

  ad::Tape& tape = *images.tape();
  ad::Var centers_node = tape.constant(centers, "cutout_centers");
  const ad::NodeId ix = images.id();
  return tape.record(
      "soft_cutout", {images, holes, length, centers_node}, std::move(out),
      [&tape, ix, g, lv, weights, centers = std::move(centers), keep = std::move(keep)](
          const Tensor& grad, std::span<Tensor* const> grads) {
        const Tensor& xv = tape.node(ix).value;
        const std::size_t plane = g.h * g.w;
        double d_holes = 0.0, d_length = 0.0;
        std::vector<double> prof_y(g.holes), prof_x(g.holes), dprof_y(g.holes), dprof_x(g.holes);
        for (std::size_t a = 0; a < g.n; ++a) {
          for (std::size_t i = 0; i < g.h; ++i) {
            for (std::size_t j = 0; j < g.w; ++j) {
              const std::size_t p = i * g.w + j;
              // sum over channels of upstream * input at this pixel
              double gx = 0.0;
              for (std::size_t ch = 0; ch < g.c; ++ch) {
                const std::size_t idx = (a * g.c + ch) * plane + p;
                if (grads[0]) (*grads[0])[idx] += grad[idx] * keep[a * plane + p];
                gx += grad[idx] * xv[idx];
              }
              if (gx == 0.0) continue;
              bool any = false;
              for (std::size_t k = 0; k < g.holes; ++k) {
                const double dy = static_cast<double>(i) - centers[(a * g.holes + k) * 2 + 0];
                const double dx = static_cast<double>(j) - centers[(a * g.holes + k) * 2 + 1];
                prof_y[k] = cutout_profile(dy, lv);
                prof_x[k] = cutout_profile(dx, lv);
                dprof_y[k] = cutout_profile_dlength(dy, lv);
                dprof_x[k] = cutout_profile_dlength(dx, lv);
                any = any || prof_y[k] * prof_x[k] != 0.0 || dprof_y[k] != 0.0 || dprof_x[k] != 0.0;
              }
              if (!any) continue;
              for (std::size_t k = 0; k < g.holes; ++k) {
                double others = 1.0;
                for (std::size_t q = 0; q < g.holes; ++q) {
                  if (q != k) others *= 1.0 - weights[q] * prof_y[q] * prof_x[q];
                }
                // d(keep)/d(a_k) = -others, a_k = w_k * m_k
                const double dkeep_dm = -others * weights[k];
                d_length += gx * dkeep_dm * (dprof_y[k] * prof_x[k] + prof_y[k] * dprof_x[k]);
                if (k + 1 == g.holes) d_holes += gx * -others * prof_y[k] * prof_x[k];
              }
            }
          }
        }
        if (grads[1]) (*grads[1])[0] += d_holes;
        if (grads[2]) (*grads[2])[0] += d_length;
      });
}

}  // namespace cpmlho::nn
