#include "saghog/config.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>
#include <variant>

namespace saghog {

namespace {

using Field = std::variant<int PipelineConfig::*, double PipelineConfig::*, bool PipelineConfig::*,
                           std::string PipelineConfig::*, uint64_t PipelineConfig::*>;

const std::map<std::string, Field>& field_table() {
  static const std::map<std::string, Field> table = {
      {"profile", &PipelineConfig::profile},
      {"seed", &PipelineConfig::seed},
      {"workers", &PipelineConfig::workers},
      {"binarization", &PipelineConfig::binarization},
      {"sauvola_window", &PipelineConfig::sauvola_window},
      {"sauvola_k", &PipelineConfig::sauvola_k},
      {"sauvola_r", &PipelineConfig::sauvola_r},
      {"canny_low", &PipelineConfig::canny_low},
      {"canny_high", &PipelineConfig::canny_high},
      {"sift_octaves", &PipelineConfig::sift_octaves},
      {"sift_scales", &PipelineConfig::sift_scales},
      {"sift_contrast", &PipelineConfig::sift_contrast},
      {"sift_edge_ratio", &PipelineConfig::sift_edge_ratio},
      {"sift_upright", &PipelineConfig::sift_upright},
      {"hog_soft_binning", &PipelineConfig::hog_soft_binning},
      {"min_ink", &PipelineConfig::min_ink},
      {"kp_cap", &PipelineConfig::kp_cap},
      {"mask_confidence", &PipelineConfig::mask_confidence},
      {"mask_edge_fraction", &PipelineConfig::mask_edge_fraction},
      {"max_masks", &PipelineConfig::max_masks},
      {"min_keypoints", &PipelineConfig::min_keypoints},
      {"require_mask", &PipelineConfig::require_mask},
      {"val_fraction", &PipelineConfig::val_fraction},
      {"patch_size", &PipelineConfig::patch_size},
      {"encoder_dim", &PipelineConfig::encoder_dim},
      {"encoder_depth", &PipelineConfig::encoder_depth},
      {"decoder_dim", &PipelineConfig::decoder_dim},
      {"decoder_depth", &PipelineConfig::decoder_depth},
      {"mlp_ratio", &PipelineConfig::mlp_ratio},
      {"channels", &PipelineConfig::channels},
      {"mask_ratio", &PipelineConfig::mask_ratio},
      {"rvlad_clusters", &PipelineConfig::rvlad_clusters},
      {"rvlad_mode", &PipelineConfig::rvlad_mode},
      {"target_feature", &PipelineConfig::target_feature},
      {"pre_epochs", &PipelineConfig::pre_epochs},
      {"pre_lr", &PipelineConfig::pre_lr},
      {"pre_weight_decay", &PipelineConfig::pre_weight_decay},
      {"pre_clip", &PipelineConfig::pre_clip},
      {"pre_warmup_epochs", &PipelineConfig::pre_warmup_epochs},
      {"pre_batch_pages", &PipelineConfig::pre_batch_pages},
      {"pre_patches_per_page", &PipelineConfig::pre_patches_per_page},
      {"crop_size", &PipelineConfig::crop_size},
      {"aug_gray_p", &PipelineConfig::aug_gray_p},
      {"aug_bin_p", &PipelineConfig::aug_bin_p},
      {"checkpoint_every", &PipelineConfig::checkpoint_every},
      {"ft_epochs", &PipelineConfig::ft_epochs},
      {"ft_lr", &PipelineConfig::ft_lr},
      {"ft_weight_decay", &PipelineConfig::ft_weight_decay},
      {"ft_clip", &PipelineConfig::ft_clip},
      {"ft_warmup_epochs", &PipelineConfig::ft_warmup_epochs},
      {"ft_classes_per_batch", &PipelineConfig::ft_classes_per_batch},
      {"ft_samples_per_class", &PipelineConfig::ft_samples_per_class},
      {"ft_patience", &PipelineConfig::ft_patience},
      {"ft_patches_per_page", &PipelineConfig::ft_patches_per_page},
      {"ms_alpha", &PipelineConfig::ms_alpha},
      {"ms_beta", &PipelineConfig::ms_beta},
      {"ms_lambda", &PipelineConfig::ms_lambda},
      {"ms_epsilon", &PipelineConfig::ms_epsilon},
      {"aug_morph_p", &PipelineConfig::aug_morph_p},
      {"token_dropout_p", &PipelineConfig::token_dropout_p},
      {"regime", &PipelineConfig::regime},
      {"freeze_backbone", &PipelineConfig::freeze_backbone},
      {"cluster_k", &PipelineConfig::cluster_k},
      {"cluster_ratio", &PipelineConfig::cluster_ratio},
      {"cluster_max_iters", &PipelineConfig::cluster_max_iters},
      {"cluster_tol", &PipelineConfig::cluster_tol},
      {"power_alpha", &PipelineConfig::power_alpha},
      {"pca_dim", &PipelineConfig::pca_dim},
      {"pca_eps", &PipelineConfig::pca_eps},
      {"encode_patches_per_page", &PipelineConfig::encode_patches_per_page},
  };
  return table;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::string unquote(const std::string& s) {
  if (s.size() >= 2 && ((s.front() == '"' && s.back() == '"') || (s.front() == '\'' && s.back() == '\'')))
    return s.substr(1, s.size() - 2);
  return s;
}

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

PipelineConfig default_config(const std::string& profile) {
  PipelineConfig cfg;
  if (profile == "paper") {
    cfg.profile = "paper";
    return cfg;
  }
  if (profile == "desk") {
    cfg.profile = "desk";
    cfg.encoder_dim = 64;
    cfg.encoder_depth = 2;
    cfg.decoder_dim = 64;
    cfg.channels = 1;
    cfg.rvlad_clusters = 16;
    cfg.kp_cap = 256;
    cfg.min_keypoints = 100;
    cfg.pre_epochs = 50;
    cfg.pre_batch_pages = 8;   // 8 pages x 32 patches = 256-patch batches
    cfg.ft_epochs = 12;
    cfg.ft_classes_per_batch = 16;
    cfg.ft_samples_per_class = 8;
    cfg.ft_patches_per_page = 16;
    cfg.cluster_k = 256;
    cfg.pca_dim = 64;
    cfg.encode_patches_per_page = 48;
    return cfg;
  }
  throw std::invalid_argument("default_config: unknown profile '" + profile + "'");
}

void apply_config_kv(PipelineConfig& cfg, const std::string& key, const std::string& raw_value) {
  const auto& table = field_table();
  const auto it = table.find(key);
  if (it == table.end()) throw std::invalid_argument("config: unknown key '" + key + "'");
  const std::string value = unquote(trim(raw_value));
  try {
    std::visit(
        [&](auto member) {
          using M = std::decay_t<decltype(cfg.*member)>;
          if constexpr (std::is_same_v<M, int>) {
            cfg.*member = std::stoi(value);
          } else if constexpr (std::is_same_v<M, double>) {
            cfg.*member = std::stod(value);
          } else if constexpr (std::is_same_v<M, uint64_t>) {
            cfg.*member = std::stoull(value);
          } else if constexpr (std::is_same_v<M, bool>) {
            if (value == "true" || value == "1")
              cfg.*member = true;
            else if (value == "false" || value == "0")
              cfg.*member = false;
            else
              throw std::invalid_argument("expected boolean");
          } else {
            cfg.*member = value;
          }
        },
        it->second);
  } catch (const std::exception&) {
    throw std::invalid_argument("config: bad value for '" + key + "': " + raw_value);
  }
}

void apply_config_file(PipelineConfig& cfg, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("config: cannot open " + path);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config: line " + std::to_string(lineno) + " is not key = value");
    apply_config_kv(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
}

std::string serialize_config(const PipelineConfig& cfg) {
  std::ostringstream out;
  for (const auto& [key, field] : field_table()) {
    out << key << " = ";
    std::visit(
        [&](auto member) {
          using M = std::decay_t<decltype(cfg.*member)>;
          if constexpr (std::is_same_v<M, double>) {
            out << format_double(cfg.*member);
          } else if constexpr (std::is_same_v<M, bool>) {
            out << ((cfg.*member) ? "true" : "false");
          } else if constexpr (std::is_same_v<M, std::string>) {
            out << '"' << cfg.*member << '"';
          } else {
            out << cfg.*member;
          }
        },
        field);
    out << "\n";
  }
  return out.str();
}

std::string config_hash(const PipelineConfig& cfg) {
  const std::string s = serialize_config(cfg);
  uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

ad::ViTConfig vit_config(const PipelineConfig& cfg) {
  ad::ViTConfig v;
  v.patch = cfg.patch_size;
  v.dim = cfg.encoder_dim;
  v.depth = cfg.encoder_depth;
  v.decoder_dim = cfg.decoder_dim;
  v.decoder_depth = cfg.decoder_depth;
  v.mlp_ratio = cfg.mlp_ratio;
  v.channels = cfg.channels;
  v.mask_ratio = cfg.mask_ratio;
  v.validate();
  return v;
}

}  // namespace saghog
