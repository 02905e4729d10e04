#pragma once

#include <cstdint>
#include <string>

#include "saghog/model.hpp"

namespace saghog {

// Every tunable of the pipeline. `paper` profile carries the full-scale
// training defaults; `desk` shrinks dimensions and budgets so the whole
// pipeline runs on a workstation. All keys are settable from a flat
// key = value config file and are rejected when unknown.
struct PipelineConfig {
  std::string profile = "paper";
  uint64_t seed = 42;
  int workers = 1;

  // imaging
  std::string binarization = "sauvola";  // otsu | sauvola
  int sauvola_window = 25;
  double sauvola_k = 0.2;
  double sauvola_r = 128.0;
  double canny_low = 50.0;
  double canny_high = 150.0;

  // features
  int sift_octaves = 3;
  int sift_scales = 3;
  double sift_contrast = 0.04;
  double sift_edge_ratio = 10.0;
  bool sift_upright = true;
  bool hog_soft_binning = false;
  double min_ink = 0.01;
  int kp_cap = 512;

  // curation
  double mask_confidence = 0.8;
  double mask_edge_fraction = 0.10;
  int max_masks = 2;
  int min_keypoints = 1000;
  bool require_mask = false;
  double val_fraction = 0.1;

  // model
  int patch_size = 4;
  int encoder_dim = 512;
  int encoder_depth = 8;
  int decoder_dim = 256;
  int decoder_depth = 1;
  int mlp_ratio = 4;
  int channels = 3;
  double mask_ratio = 0.75;
  int rvlad_clusters = 100;
  std::string rvlad_mode = "class_token";  // class_token | tokens
  std::string target_feature = "hog_bin";  // pixel | hog_rgb | hog_gray | hog_bin

  // pretraining
  int pre_epochs = 200;
  double pre_lr = 8e-4;
  double pre_weight_decay = 0.05;
  double pre_clip = 0.02;
  int pre_warmup_epochs = 5;
  int pre_batch_pages = 64;
  int pre_patches_per_page = 32;
  int crop_size = 256;
  double aug_gray_p = 0.2;
  double aug_bin_p = 0.2;
  int checkpoint_every = 25;

  // finetuning
  int ft_epochs = 50;
  double ft_lr = 1e-3;
  double ft_weight_decay = 0.01;
  double ft_clip = 1.0;
  int ft_warmup_epochs = 5;
  int ft_classes_per_batch = 64;   // P
  int ft_samples_per_class = 16;   // K
  int ft_patience = 5;
  int ft_patches_per_page = 32;
  double ms_alpha = 2.0;
  double ms_beta = 50.0;
  double ms_lambda = 0.5;
  double ms_epsilon = 0.1;
  double aug_morph_p = 0.1;
  double token_dropout_p = 0.1;
  std::string regime = "supervised";  // supervised | cls
  bool freeze_backbone = false;

  // pseudo-label clustering
  int cluster_k = 5000;
  double cluster_ratio = 0.9;
  int cluster_max_iters = 100;
  double cluster_tol = 1e-4;

  // retrieval
  double power_alpha = 0.4;
  int pca_dim = 512;
  double pca_eps = 1e-8;
  int encode_patches_per_page = 0;  // 0 = every admissible patch
};

// Base configuration for a profile name ("paper" or "desk").
PipelineConfig default_config(const std::string& profile);

// Apply `key = value` lines (# comments, blank lines allowed). Unknown keys
// and malformed values throw with the offending line.
void apply_config_file(PipelineConfig& cfg, const std::string& path);
void apply_config_kv(PipelineConfig& cfg, const std::string& key, const std::string& value);

// Canonical serialization (sorted keys) and its FNV-1a hash; artifacts embed
// the hash so downstream commands can detect mismatched chains.
std::string serialize_config(const PipelineConfig& cfg);
std::string config_hash(const PipelineConfig& cfg);

ad::ViTConfig vit_config(const PipelineConfig& cfg);

}  // namespace saghog
