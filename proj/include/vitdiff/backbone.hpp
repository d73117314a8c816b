// Copyright (C) 2026 The vitdiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "vitdiff/ascend.hpp"
#include "vitdiff/iuvit.hpp"

#include <memory>
#include <variant>

namespace vitdiff {

using BackboneConfig = std::variant<IUViTConfig, ASCENDConfig>;

inline std::string backbone_kind(const BackboneConfig& config) {
  return std::holds_alternative<IUViTConfig>(config) ? "iuvit" : "ascend";
}

inline Index backbone_image_size(const BackboneConfig& config) {
  return std::visit([](const auto& c) { return c.image_size; }, config);
}

inline void validate_backbone(const BackboneConfig& config) {
  std::visit([](const auto& c) { c.validate(); }, config);
}

/// `materialize = false` registers parameter shapes only (no weights).
template <typename S>
std::unique_ptr<Denoiser<S>> make_backbone(const BackboneConfig& config, std::uint64_t seed, bool materialize = true) {
  if (const auto* iu = std::get_if<IUViTConfig>(&config)) return std::make_unique<IUViT<S>>(*iu, seed, materialize);
  return std::make_unique<ASCEND<S>>(std::get<ASCENDConfig>(config), seed, materialize);
}

}  // namespace vitdiff
