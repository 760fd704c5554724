// config.hpp
//
// Human-editable key/value configuration files.
//
// Grammar (one statement per line):
//
//   line     := blank | comment | section | pair
//   comment  := '#' any*
//   section  := '[' name ']'           ; "prompt" or "crf"
//   pair     := key '=' value [comment]
//   value    := number | 'true' | 'false' | string | word | list
//   string   := '"' (char | '\"' | '\\')* '"'
//   list     := '[' [value (',' value)*] ']'
//
// Top-level keys: eta theta lambda phi_iom phi_iou prompt_types caa_iters
// sinkhorn_iters sinkhorn_tol last_attn_layers bg_set bg_queries
// mutual_background stuff_queries max_steps.
// [prompt]: color thickness blur_kernel blur_sigma.
// [crf]: enabled gauss_sxy gauss_w bilat_sxy bilat_srgb bilat_w iterations
// exact_max_pixels.
//
// Unset keys keep the defaults of PipelineConfig::defaults(). Later
// assignments win; bg_set and bg_queries both replace the background list.

#pragma once

#include <filesystem>
#include <string>
#include <string_view>

#include "carseg/core.hpp"

namespace carseg {

/// Throws ConfigError naming the offending line.
PipelineConfig parse_config(std::string_view text, PipelineConfig base = PipelineConfig::defaults());
/// Throws IoError if unreadable, ConfigError on parse errors.
PipelineConfig load_config(const std::filesystem::path& path);

/// Canonical text form; parse_config(format_config(c)) == c.
std::string format_config(const PipelineConfig& cfg);

/// Stable 64-bit FNV-1a hash of format_config(cfg), hex encoded.
std::string config_fingerprint(const PipelineConfig& cfg);

}  // namespace carseg
