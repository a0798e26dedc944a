#pragma once

// Low-rank additive adapters over the reasoner's projections.

#include <array>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "autograd.hpp"
#include "rng.hpp"

namespace molem {

/// Projection sites an adapter attaches to in every transformer layer.
enum class Site : std::size_t { Query = 0, Key, Value, Output, MlpIn, MlpOut };
inline constexpr std::size_t kSiteCount = 6;
inline constexpr std::array<const char*, kSiteCount> kSiteNames = {"q", "k", "v", "o", "fc1", "fc2"};

struct LoraFactor {
  Parameter down;  // in x rank
  Parameter up;    // rank x out, zero at initialization
};

struct LoraShape {
  std::size_t n_layers = 0;
  std::size_t d_model = 0;
  std::size_t d_ff = 0;
  std::size_t rank = 4;
  double alpha = 8.0;
};

class LoraAdapter {
 public:
  LoraAdapter() = default;

  /// Fresh adapter: down-projections are truncated normal with
  /// sigma = 1/sqrt(in), up-projections are zero so the adapter starts as the
  /// identity.
  LoraAdapter(std::string name, const LoraShape& shape, Rng& rng) : name_(std::move(name)), shape_(shape) {
    layers_.resize(shape.n_layers);
    for (std::size_t l = 0; l < shape.n_layers; ++l) {
      for (std::size_t s = 0; s < kSiteCount; ++s) {
        const auto [in, out] = site_dims(static_cast<Site>(s));
        const std::string prefix = name_ + "/layer" + std::to_string(l) + "/" + kSiteNames[s];
        Tensor down = Tensor::matrix(in, shape.rank);
        const double sigma = 1.0 / std::sqrt(static_cast<double>(in));
        for (double& x : down.data) x = rng.truncated_normal(sigma);
        layers_[l][s].down = Parameter(prefix + "/A", std::move(down));
        layers_[l][s].up = Parameter(prefix + "/B", Tensor::matrix(shape.rank, out));
      }
    }
  }

  LoraAdapter(const LoraAdapter&) = delete;
  LoraAdapter& operator=(const LoraAdapter&) = delete;
  LoraAdapter(LoraAdapter&&) = default;
  LoraAdapter& operator=(LoraAdapter&&) = default;

  const std::string& name() const { return name_; }
  const LoraShape& shape() const { return shape_; }
  double scaling() const { return shape_.alpha / static_cast<double>(shape_.rank); }

  LoraFactor& factor(std::size_t layer, Site site) { return layers_[layer][static_cast<std::size_t>(site)]; }
  const LoraFactor& factor(std::size_t layer, Site site) const { return layers_[layer][static_cast<std::size_t>(site)]; }

  std::pair<std::size_t, std::size_t> site_dims(Site s) const {
    switch (s) {
      case Site::MlpIn: return {shape_.d_model, shape_.d_ff};
      case Site::MlpOut: return {shape_.d_ff, shape_.d_model};
      default: return {shape_.d_model, shape_.d_model};
    }
  }

  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> out;
    for (auto& layer : layers_) {
      for (auto& f : layer) {
        out.push_back(&f.down);
        out.push_back(&f.up);
      }
    }
    return out;
  }

  bool frozen() const { return frozen_; }
  void freeze() {
    frozen_ = true;
    for (Parameter* p : parameters()) p->frozen = true;
  }

 private:
  std::string name_;
  LoraShape shape_;
  std::vector<std::array<LoraFactor, kSiteCount>> layers_;
  bool frozen_ = false;
};

}  // namespace molem
