// Writer-retrieval pipeline driver: curate pages, cluster descriptors,
// pretrain and finetune the encoder, encode page descriptors, evaluate
// retrieval, and render a qualitative report.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>

#include "CLI11.hpp"
#include "json.hpp"
#include "saghog/config.hpp"
#include "saghog/curation.hpp"
#include "saghog/features.hpp"
#include "saghog/image_io.hpp"
#include "saghog/retrieval.hpp"
#include "saghog/training.hpp"
#include "saghog/util.hpp"

namespace fs = std::filesystem;
using namespace saghog;

namespace {

constexpr int kExitEmptyAdmitted = 2;
constexpr int kExitMissingSidecar = 3;
constexpr int kExitChainMismatch = 4;

struct CommonOpts {
  std::string profile = "paper";
  std::string config_file;
  int64_t seed = -1;
  int workers = 0;
  bool force = false;
};

PipelineConfig resolve_config(const CommonOpts& opts) {
  PipelineConfig cfg = default_config(opts.profile);
  if (!opts.config_file.empty()) apply_config_file(cfg, opts.config_file);
  if (opts.seed >= 0) cfg.seed = static_cast<uint64_t>(opts.seed);
  if (opts.workers > 0) cfg.workers = opts.workers;
  std::cerr << "[config] resolved (hash " << config_hash(cfg) << ")\n" << serialize_config(cfg);
  return cfg;
}

std::string cache_dir() {
  const char* env = std::getenv("SAGHOG_CACHE");
  return env ? env : "saghog_cache";
}

void check_chain(const std::string& artifact_hash, const PipelineConfig& cfg, bool force,
                 const std::string& what) {
  if (artifact_hash.empty()) return;
  if (artifact_hash != config_hash(cfg)) {
    std::cerr << "error: " << what << " was produced under config " << artifact_hash
              << " but the current config hashes to " << config_hash(cfg)
              << " (use --force to override)\n";
    if (!force) std::exit(kExitChainMismatch);
  }
}

DetectorParams detector_params(const PipelineConfig& cfg) {
  DetectorParams det;
  det.octaves = cfg.sift_octaves;
  det.scales_per_octave = cfg.sift_scales;
  det.contrast_threshold = cfg.sift_contrast;
  det.edge_ratio = cfg.sift_edge_ratio;
  return det;
}

std::string resolve_page_path(const std::string& path, const std::string& base_dir) {
  if (!path.empty() && path[0] == '/') return path;
  return base_dir.empty() ? path : base_dir + "/" + path;
}

// Page image with the accepted-mask union applied: pixels outside the mask
// turn to background and the page is cropped to the mask bounding box.
GrayImage masked_page(const PageRecord& rec, const std::string& base_dir) {
  GrayImage gray = load_image(resolve_page_path(rec.path, base_dir)).gray;
  if (!rec.mask_path) return gray;
  const auto mask_img = load_image(resolve_page_path(*rec.mask_path, base_dir)).gray;
  BinaryImage mask(mask_img.width, mask_img.height);
  for (size_t i = 0; i < mask_img.data.size(); ++i) mask.data[i] = mask_img.data[i] > 127 ? 1 : 0;
  if (mask.width != gray.width || mask.height != gray.height)
    throw std::runtime_error("mask/page size mismatch for " + rec.page_id);
  for (size_t i = 0; i < gray.data.size(); ++i)
    if (!mask.data[i]) gray.data[i] = 255;
  const auto box = mask_to_bbox(mask);
  if (!box) return gray;
  const int x0 = static_cast<int>(box->x0), y0 = static_cast<int>(box->y0);
  const int w = static_cast<int>(box->x1 - box->x0) + 1, h = static_cast<int>(box->y1 - box->y0) + 1;
  return crop(gray, x0, y0, w, h);
}

struct PagePatchSet {
  std::vector<BinaryImage> bins;
  std::vector<std::string> ids;
  std::vector<Keypoint> kps;  // keypoint per kept patch
};

PagePatchSet page_patch_set(const PageRecord& rec, const std::string& base_dir,
                            const PipelineConfig& cfg, size_t limit) {
  PagePatchSet out;
  const GrayImage gray = masked_page(rec, base_dir);
  const BinaryImage bin = binarize(gray, cfg);
  auto kps = detect_keypoints(bin, detector_params(cfg));
  if (cfg.kp_cap > 0 && kps.size() > static_cast<size_t>(cfg.kp_cap))
    kps.resize(static_cast<size_t>(cfg.kp_cap));
  auto batch = sample_patches(bin, kps, cfg.min_ink, limit, rec.page_id);
  for (size_t i = 0; i < batch.size(); ++i) {
    out.bins.push_back(std::move(batch.patches[i]));
    out.ids.push_back(rec.page_id + "#" + std::to_string(batch.prov[i].keypoint_index));
    out.kps.push_back(kps[batch.prov[i].keypoint_index]);
  }
  return out;
}

std::vector<float> binary_input(const BinaryImage& bin, int channels) {
  std::vector<float> v(static_cast<size_t>(channels) * 1024);
  for (int c = 0; c < channels; ++c)
    for (size_t i = 0; i < bin.data.size(); ++i)
      v[static_cast<size_t>(c) * 1024 + i] = bin.data[i] ? 0.f : 1.f;
  return v;
}

// ---- curate ----

int cmd_curate(const CommonOpts& common, const std::string& in_dir, const std::string& masks_dir,
               const std::string& out_manifest, const std::string& eval_boxes) {
  PipelineConfig cfg = resolve_config(common);

  // Page discovery: index.jsonl when present, else <writer>-<page>.<ext> files.
  std::vector<PageRecord> records;
  const fs::path index = fs::path(in_dir) / "index.jsonl";
  if (fs::exists(index)) {
    std::ifstream in(index);
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto j = nlohmann::json::parse(line);
      PageRecord r;
      r.page_id = j.at("page_id").get<std::string>();
      r.writer_id = j.at("writer_id").get<std::string>();
      r.path = resolve_page_path(j.at("path").get<std::string>(), in_dir);
      records.push_back(std::move(r));
    }
  } else {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(in_dir)) {
      const auto ext = e.path().extension().string();
      if (ext == ".png" || ext == ".pgm" || ext == ".ppm") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      PageRecord r;
      r.page_id = f.stem().string();
      const auto dash = r.page_id.find('-');
      r.writer_id = dash == std::string::npos ? r.page_id : r.page_id.substr(0, dash);
      r.path = f.string();
      records.push_back(std::move(r));
    }
  }
  if (records.empty()) {
    std::cerr << "error: no pages found in " << in_dir << "\n";
    return 1;
  }

  const std::string mask_out_dir = cache_dir() + "/masks";
  std::vector<BoxRecord> predicted_boxes;
  const auto det = detector_params(cfg);

  parallel_for(records.size(), cfg.workers, [&](size_t i) {
    PageRecord& rec = records[i];
    LoadedImage img;
    try {
      img = load_image(rec.path);
    } catch (const std::exception& e) {
      rec.error = e.what();
      rec.admitted = false;
      return;
    }

    BinaryImage region_mask;
    bool have_mask = false;
    if (!masks_dir.empty()) {
      std::vector<MaskCandidate> cands;
      std::vector<fs::path> mask_files;
      for (const auto& e : fs::directory_iterator(masks_dir)) {
        const auto name = e.path().filename().string();
        if (name.rfind(rec.page_id + "_mask", 0) == 0 && e.path().extension() == ".png")
          mask_files.push_back(e.path());
      }
      std::sort(mask_files.begin(), mask_files.end());
      for (const auto& mf : mask_files) {
        const fs::path sidecar = fs::path(mf).replace_extension(".json");
        if (!fs::exists(sidecar)) {
          if (cfg.require_mask) {
            std::cerr << "error: missing mask sidecar " << sidecar.string() << "\n";
            std::exit(kExitMissingSidecar);
          }
          std::cerr << "warning: skipping mask without sidecar " << mf.string() << "\n";
          continue;
        }
        std::ifstream sc(sidecar);
        const auto meta = nlohmann::json::parse(sc);
        MaskCandidate cand;
        const auto mimg = load_image(mf.string()).gray;
        cand.mask = BinaryImage(mimg.width, mimg.height);
        for (size_t px = 0; px < mimg.data.size(); ++px) cand.mask.data[px] = mimg.data[px] > 127;
        cand.confidence = meta.at("confidence").get<double>();
        cands.push_back(std::move(cand));
      }
      if (!cands.empty()) {
        const BinaryImage edges = edge_map(img.gray, {cfg.canny_low, cfg.canny_high});
        CurationRules rules;
        rules.min_confidence = cfg.mask_confidence;
        rules.min_edge_fraction = cfg.mask_edge_fraction;
        rules.max_masks = cfg.max_masks;
        const auto kept = filter_masks(cands, edges, rules);
        if (!kept.empty()) {
          region_mask = kept[0].mask;
          for (size_t m = 1; m < kept.size(); ++m)
            for (size_t px = 0; px < region_mask.data.size(); ++px)
              region_mask.data[px] = region_mask.data[px] || kept[m].mask.data[px];
          have_mask = true;
        }
      }
    }
    if (cfg.require_mask && !have_mask) {
      rec.admitted = false;
      rec.kp_count = 0;
      return;
    }

    GrayImage gray = img.gray;
    if (have_mask) {
      for (size_t px = 0; px < gray.data.size(); ++px)
        if (!region_mask.data[px]) gray.data[px] = 255;
    }
    const BinaryImage bin = binarize(gray, cfg);
    auto kps = detect_keypoints(bin, det);
    rec.kp_count = static_cast<int>(kps.size());
    rec.admitted = admit_page(rec, cfg.min_keypoints);

    if (have_mask && rec.admitted) {
      fs::create_directories(mask_out_dir);
      const std::string mpath = mask_out_dir + "/" + rec.page_id + ".png";
      save_png(mpath, region_mask);
      rec.mask_path = mpath;
    }
  });

  // Curation quality: bounding boxes of accepted masks vs annotated truth.
  if (!eval_boxes.empty()) {
    for (const auto& rec : records) {
      if (!rec.mask_path) continue;
      const auto mimg = load_image(*rec.mask_path).gray;
      BinaryImage mask(mimg.width, mimg.height);
      for (size_t px = 0; px < mimg.data.size(); ++px) mask.data[px] = mimg.data[px] > 127;
      if (const auto box = mask_to_bbox(mask)) predicted_boxes.push_back({rec.page_id, *box});
    }
    const auto truth = read_box_csv(eval_boxes);
    std::cout << "curation IoU@0.5 = " << iou_at(predicted_boxes, truth, 0.5) << " over "
              << predicted_boxes.size() << " boxes\n";
  }

  Manifest manifest;
  manifest.records = std::move(records);
  manifest.config_hash = config_hash(cfg);
  assign_splits(manifest, cfg.val_fraction, cfg.seed);
  write_manifest(out_manifest, manifest);

  size_t admitted = 0;
  for (const auto& r : manifest.records) admitted += r.admitted ? 1 : 0;
  std::cout << "curate: " << admitted << "/" << manifest.records.size() << " pages admitted -> "
            << out_manifest << "\n";
  return admitted == 0 ? kExitEmptyAdmitted : 0;
}

// ---- cluster ----

int cmd_cluster(const CommonOpts& common, const std::string& manifest_path, int k_override,
                const std::string& out_path, const std::string& dump_descriptors) {
  PipelineConfig cfg = resolve_config(common);
  const Manifest manifest = read_manifest(manifest_path);
  check_chain(manifest.config_hash, cfg, common.force, "manifest");
  const std::string base = fs::path(manifest_path).parent_path().string();
  const int k = k_override > 0 ? k_override : cfg.cluster_k;

  std::vector<const PageRecord*> pages;
  for (const auto& r : manifest.records)
    if (r.admitted && r.split == "train") pages.push_back(&r);
  if (pages.empty()) {
    std::cerr << "error: no admitted training pages\n";
    return 1;
  }

  std::vector<std::vector<std::string>> page_ids(pages.size());
  std::vector<std::vector<float>> page_descs(pages.size());
  SiftParams sp;
  sp.upright = cfg.sift_upright;
  parallel_for(pages.size(), cfg.workers, [&](size_t i) {
    const auto set = page_patch_set(*pages[i], base, cfg, cfg.ft_patches_per_page);
    const GrayImage gray = masked_page(*pages[i], base);
    const GrayImage bin_gray = to_gray(binarize(gray, cfg));
    for (size_t s = 0; s < set.bins.size(); ++s) {
      const auto desc = sift_descriptor(bin_gray, set.kps[s], sp);
      if (!desc) continue;  // support window left the image
      page_ids[i].push_back(set.ids[s]);
      page_descs[i].insert(page_descs[i].end(), desc->values.begin(), desc->values.end());
    }
  });

  std::vector<std::string> ids;
  std::vector<float> descs;
  for (size_t i = 0; i < pages.size(); ++i) {
    ids.insert(ids.end(), page_ids[i].begin(), page_ids[i].end());
    descs.insert(descs.end(), page_descs[i].begin(), page_descs[i].end());
  }
  if (ids.empty()) {
    std::cerr << "error: no descriptors extracted\n";
    return 1;
  }
  if (!dump_descriptors.empty())
    write_sghd(dump_descriptors, descs, static_cast<uint32_t>(ids.size()), 128);

  const auto result = kmeans_ratio(descs, static_cast<int>(ids.size()), 128, k, cfg.seed,
                                   cfg.cluster_max_iters, cfg.cluster_tol, cfg.cluster_ratio);
  if (!result.warning.empty()) std::cerr << "warning: " << result.warning << "\n";
  write_pseudo_labels(out_path, ids, result, config_hash(cfg));
  size_t kept = 0;
  for (auto v : result.kept) kept += v;
  std::cout << "cluster: " << ids.size() << " descriptors, k=" << result.k << ", kept "
            << kept << " after ratio test -> " << out_path << "\n";
  return 0;
}

// ---- pretrain ----

int cmd_pretrain(const CommonOpts& common, const std::string& manifest_path,
                 const std::string& out_ckpt) {
  PipelineConfig cfg = resolve_config(common);
  const Manifest manifest = read_manifest(manifest_path);
  check_chain(manifest.config_hash, cfg, common.force, "manifest");
  const std::string base = fs::path(manifest_path).parent_path().string();

  std::ofstream log(out_ckpt + ".log.csv");
  log << "epoch,split,loss,map,lr\n";
  auto result = pretrain_manifest(manifest, base, cfg, cfg.seed, &log, cache_dir() + "/checkpoints");
  auto ckpt = make_model_checkpoint(result.model, nullptr, cfg, "pretrain");
  ad::save_checkpoint(out_ckpt, ckpt);
  std::cout << "pretrain: " << result.epoch_loss.size() << " epochs, first loss "
            << result.epoch_loss.front() << ", final loss " << result.epoch_loss.back() << " -> "
            << out_ckpt << "\n";
  if (result.skipped_steps > 0)
    std::cerr << "warning: " << result.skipped_steps << " steps skipped (non-finite gradients)\n";
  return 0;
}

// ---- finetune ----

ad::ViTConfig vit_from_meta(const nlohmann::json& meta) {
  ad::ViTConfig vc;
  const auto& v = meta.at("vit");
  vc.patch = v.at("patch").get<int>();
  vc.dim = v.at("dim").get<int>();
  vc.depth = v.at("depth").get<int>();
  vc.decoder_dim = v.at("decoder_dim").get<int>();
  vc.decoder_depth = v.at("decoder_depth").get<int>();
  vc.mlp_ratio = v.at("mlp_ratio").get<int>();
  vc.channels = v.at("channels").get<int>();
  vc.mask_ratio = v.at("mask_ratio").get<double>();
  vc.target_dim = v.at("target_dim").get<int>();
  return vc;
}

int cmd_finetune(const CommonOpts& common, const std::string& manifest_path,
                 const std::string& init_ckpt, const std::string& pseudo_labels,
                 const std::string& out_ckpt, const std::string& regime_flag, bool freeze_flag) {
  PipelineConfig cfg = resolve_config(common);
  if (!regime_flag.empty()) cfg.regime = regime_flag;
  if (freeze_flag) cfg.freeze_backbone = true;
  const Manifest manifest = read_manifest(manifest_path);
  check_chain(manifest.config_hash, cfg, common.force, "manifest");
  const std::string base = fs::path(manifest_path).parent_path().string();

  if (cfg.regime == "cls" && pseudo_labels.empty()) {
    std::cerr << "error: regime=cls needs --pseudo-labels <file> (run the cluster command first)\n";
    return 1;
  }

  // Model init: pretrained checkpoint or fresh weights (from-scratch baseline).
  ad::MaeP<float> model;
  const ad::ViTConfig vc = vit_config(cfg);
  if (!init_ckpt.empty()) {
    const auto ckpt = ad::load_checkpoint(init_ckpt);
    const auto meta = nlohmann::json::parse(ckpt.meta_json);
    check_chain(meta.value("config_hash", ""), cfg, common.force, "pretrained checkpoint");
    const ad::ViTConfig saved = vit_from_meta(meta);
    if (saved.dim != vc.dim || saved.depth != vc.depth || saved.patch != vc.patch ||
        saved.channels != vc.channels) {
      std::cerr << "error: checkpoint dims (dim " << saved.dim << ", depth " << saved.depth
                << ", patch " << saved.patch << ", channels " << saved.channels
                << ") do not match config (dim " << vc.dim << ", depth " << vc.depth << ", patch "
                << vc.patch << ", channels " << vc.channels << ")\n";
      return 1;
    }
    Rng dummy(0);
    model = ad::init_mae<float>(saved, dummy);
    load_model_checkpoint(ckpt, model, nullptr);
  } else {
    Rng init_rng(derive_seed(cfg.seed, 0x5EED));
    model = ad::init_mae<float>(vc, init_rng);
  }

  std::map<std::string, PseudoLabelEntry> pseudo;
  if (cfg.regime == "cls") {
    std::string ph;
    pseudo = read_pseudo_labels(pseudo_labels, &ph);
    check_chain(ph, cfg, common.force, "pseudo-label file");
  }

  // Training patches from admitted train pages; labels by regime.
  std::vector<const PageRecord*> train_pages, val_pages_rec;
  for (const auto& r : manifest.records) {
    if (!r.admitted) continue;
    (r.split == "train" ? train_pages : val_pages_rec).push_back(&r);
  }
  if (train_pages.empty()) {
    std::cerr << "error: no admitted training pages\n";
    return 1;
  }

  std::map<std::string, int> writer_index;
  for (const auto* r : train_pages)
    if (!writer_index.count(r->writer_id))
      writer_index[r->writer_id] = static_cast<int>(writer_index.size());

  std::vector<PagePatchSet> sets(train_pages.size());
  parallel_for(train_pages.size(), cfg.workers, [&](size_t i) {
    sets[i] = page_patch_set(*train_pages[i], base, cfg, cfg.ft_patches_per_page);
  });

  PatchStore store;
  store.channels = cfg.channels;
  store.target_dim = target_dim_for(cfg);
  for (size_t i = 0; i < train_pages.size(); ++i) {
    for (size_t s = 0; s < sets[i].bins.size(); ++s) {
      int label = -1;
      if (cfg.regime == "cls") {
        const auto it = pseudo.find(sets[i].ids[s]);
        if (it == pseudo.end() || !it->second.kept) continue;
        label = it->second.cluster;
      } else {
        label = writer_index[train_pages[i]->writer_id];
      }
      TrainPatch p;
      p.bin = sets[i].bins[s];
      p.input = binary_input(p.bin, cfg.channels);
      p.id = sets[i].ids[s];
      p.label = label;
      store.patches.push_back(std::move(p));
    }
  }
  if (store.patches.empty()) {
    std::cerr << "error: no labeled training patches\n";
    return 1;
  }

  std::vector<ValidationPage> val;
  for (const auto* r : val_pages_rec) {
    const auto set = page_patch_set(*r, base, cfg, cfg.encode_patches_per_page);
    ValidationPage vp;
    vp.page_id = r->page_id;
    vp.writer_id = r->writer_id;
    for (const auto& bin : set.bins) vp.patch_inputs.push_back(binary_input(bin, cfg.channels));
    val.push_back(std::move(vp));
  }

  std::ofstream log(out_ckpt + ".log.csv");
  log << "epoch,split,loss,map,lr\n";
  auto result = finetune(model, cfg, store, val, cfg.seed, &log);
  auto ckpt = make_model_checkpoint(result.model, &result.head, cfg, "finetune");
  ad::save_checkpoint(out_ckpt, ckpt);
  std::cout << "finetune: " << result.val_map.size() << " epochs, best val mAP " << result.best_map
            << " at epoch " << result.best_epoch + 1 << " -> " << out_ckpt << "\n";
  return 0;
}

// ---- encode ----

int cmd_encode(const CommonOpts& common, const std::string& manifest_path,
               const std::string& ckpt_path, const std::string& out_prefix) {
  PipelineConfig cfg = resolve_config(common);
  const Manifest manifest = read_manifest(manifest_path);
  check_chain(manifest.config_hash, cfg, common.force, "manifest");
  const std::string base = fs::path(manifest_path).parent_path().string();

  const auto ckpt = ad::load_checkpoint(ckpt_path);
  const auto meta = nlohmann::json::parse(ckpt.meta_json);
  check_chain(meta.value("config_hash", ""), cfg, common.force, "checkpoint");
  if (!meta.contains("rvlad")) {
    std::cerr << "error: checkpoint has no encoding head (run the finetune command first)\n";
    return 1;
  }
  const ad::ViTConfig vc = vit_from_meta(meta);
  Rng dummy(0);
  ad::MaeP<float> model = ad::init_mae<float>(vc, dummy);
  ad::RvladP<float> head = ad::init_rvlad<float>(
      vc.dim, meta["rvlad"].at("clusters").get<int>(),
      meta["rvlad"].at("mode").get<std::string>() == "tokens" ? ad::RvladMode::Tokens
                                                              : ad::RvladMode::ClassToken,
      dummy);
  load_model_checkpoint(ckpt, model, &head);

  std::vector<const PageRecord*> pages;
  for (const auto& r : manifest.records)
    if (r.admitted) pages.push_back(&r);
  if (pages.size() < 2) {
    std::cerr << "error: need at least 2 admitted pages to encode a gallery\n";
    return 1;
  }

  std::vector<std::vector<float>> raw(pages.size());
  parallel_for(pages.size(), cfg.workers, [&](size_t i) {
    const auto set = page_patch_set(*pages[i], base, cfg, cfg.encode_patches_per_page);
    std::vector<std::vector<float>> inputs;
    for (const auto& bin : set.bins) inputs.push_back(binary_input(bin, cfg.channels));
    if (inputs.empty()) return;
    raw[i] = encode_page(model, head, inputs, cfg);
  });

  std::vector<std::vector<float>> train_raw;
  for (size_t i = 0; i < pages.size(); ++i)
    if (!raw[i].empty() && pages[i]->split == "train") train_raw.push_back(raw[i]);
  if (train_raw.size() < 2) {
    std::cerr << "error: need at least 2 train-split pages to fit whitening\n";
    return 1;
  }
  const auto wm = fit_whitening(train_raw, cfg.pca_dim, cfg.pca_eps);
  if (!wm.warning.empty()) std::cerr << "warning: whitening " << wm.warning << "\n";

  std::vector<GlobalDescriptor> descs;
  for (size_t i = 0; i < pages.size(); ++i) {
    if (raw[i].empty()) continue;
    descs.push_back({pages[i]->page_id, apply_whitening(wm, raw[i])});
  }
  write_descriptors(out_prefix + ".sghd", out_prefix + ".index.jsonl", descs, config_hash(cfg));
  std::cout << "encode: " << descs.size() << " page descriptors of dim " << wm.out_dim << " -> "
            << out_prefix << ".sghd\n";
  return 0;
}

// ---- eval ----

int cmd_eval(const CommonOpts& common, const std::string& manifest_path,
             const std::string& desc_prefix, const std::string& task_name,
             const std::string& out_metrics, const std::string& out_ranks) {
  PipelineConfig cfg = resolve_config(common);
  const Manifest manifest = read_manifest(manifest_path);
  std::string stored_hash;
  const auto descs =
      read_descriptors(desc_prefix + ".sghd", desc_prefix + ".index.jsonl", &stored_hash);
  check_chain(manifest.config_hash, cfg, common.force, "manifest");
  check_chain(stored_hash, cfg, common.force, "descriptor store");

  std::map<std::string, ItemLabels> labels;
  for (const auto& r : manifest.records) labels[r.page_id] = {r.writer_id, r.page_id};

  const RetrievalTask task = task_name == "page" ? RetrievalTask::Page : RetrievalTask::Writer;
  const auto ranked = rank_all(descs);
  const auto metrics = evaluate(ranked, labels, task);

  nlohmann::json mj;
  mj["task"] = task_name;
  mj["map"] = metrics.map;
  mj["top1"] = metrics.top1;
  mj["n_queries"] = metrics.n_queries;
  mj["excluded_queries"] = metrics.excluded_queries;
  mj["config_hash"] = config_hash(cfg);
  std::ofstream mo(out_metrics);
  mo << mj.dump(2) << "\n";

  if (!out_ranks.empty()) {
    std::ofstream ro(out_ranks);
    for (const auto& rl : ranked) {
      nlohmann::json rj;
      rj["query_id"] = rl.query_id;
      auto& arr = rj["neighbors"] = nlohmann::json::array();
      const auto& ql = labels.at(rl.query_id);
      for (size_t i = 0; i < rl.gallery_ids.size(); ++i) {
        const auto& gl = labels.at(rl.gallery_ids[i]);
        const bool hit = task == RetrievalTask::Writer ? gl.writer == ql.writer : gl.page == ql.page;
        arr.push_back({{"id", rl.gallery_ids[i]}, {"score", rl.scores[i]}, {"hit", hit}});
      }
      ro << rj.dump() << "\n";
    }
  }
  std::cout << "eval: task=" << task_name << " mAP=" << metrics.map << " Top-1=" << metrics.top1
            << " queries=" << metrics.n_queries << " excluded=" << metrics.excluded_queries << "\n";
  return 0;
}

// ---- report ----

int cmd_report(const CommonOpts& common, const std::string& manifest_path,
               const std::string& ranks_path, const std::string& out_html, int top_k, int max_rows) {
  resolve_config(common);
  const Manifest manifest = read_manifest(manifest_path);
  std::map<std::string, std::string> path_of;
  for (const auto& r : manifest.records) path_of[r.page_id] = r.path;

  std::ifstream in(ranks_path);
  if (!in) {
    std::cerr << "error: cannot open " << ranks_path << "\n";
    return 1;
  }
  std::ofstream out(out_html);
  out << "<!doctype html><html><head><meta charset=\"utf-8\"><title>retrieval report</title>\n"
      << "<style>body{font-family:sans-serif}table{border-collapse:collapse}"
      << "td{padding:4px;text-align:center}img{height:160px}"
      << ".hit img{border:4px solid #2a2}.miss img{border:4px solid #c22}"
      << ".query img{border:4px solid #777}</style></head><body>\n"
      << "<h1>Leave-one-out retrieval</h1><table>\n";
  std::string line;
  int rows = 0;
  while (std::getline(in, line) && rows < max_rows) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    const std::string qid = j.at("query_id").get<std::string>();
    out << "<tr><td class=\"query\"><img src=\"" << path_of[qid] << "\"><br>" << qid
        << " (query)</td>";
    int shown = 0;
    for (const auto& nb : j.at("neighbors")) {
      if (shown++ >= top_k) break;
      const std::string id = nb.at("id").get<std::string>();
      out << "<td class=\"" << (nb.at("hit").get<bool>() ? "hit" : "miss") << "\"><img src=\""
          << path_of[id] << "\"><br>" << id << "</td>";
    }
    out << "</tr>\n";
    ++rows;
  }
  out << "</table></body></html>\n";
  std::cout << "report: wrote " << out_html << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"SAGHOG writer-retrieval pipeline"};
  app.require_subcommand(1);

  CommonOpts common;
  app.add_option("--profile", common.profile, "configuration profile: paper | desk")
      ->check(CLI::IsMember({"paper", "desk"}));
  app.add_option("--config", common.config_file, "flat key = value config file");
  app.add_option("--seed", common.seed, "master seed (overrides config)");
  app.add_option("--workers", common.workers, "worker threads for page-level stages");
  app.add_flag("--force", common.force, "proceed across config-hash mismatches");

  // curate
  auto* curate = app.add_subcommand("curate", "filter masks, count keypoints, build the manifest");
  std::string in_dir, masks_dir, out_manifest, eval_boxes;
  curate->add_option("--in", in_dir, "page image directory")->required();
  curate->add_option("--masks", masks_dir, "segmentation mask directory");
  curate->add_option("--out", out_manifest, "output manifest (JSON lines)")->required();
  curate->add_option("--eval-boxes", eval_boxes, "ground-truth box CSV for IoU@0.5");

  // cluster
  auto* cluster = app.add_subcommand("cluster", "k-means pseudo-labels over SIFT descriptors");
  std::string cl_manifest, cl_out, cl_dump;
  int cl_k = 0;
  cluster->add_option("--manifest", cl_manifest)->required();
  cluster->add_option("--k", cl_k, "cluster count (default from config)");
  cluster->add_option("--out", cl_out, "pseudo-label JSON lines")->required();
  cluster->add_option("--dump-descriptors", cl_dump, "optional SGHD descriptor dump");

  // pretrain
  auto* pretrain = app.add_subcommand("pretrain", "masked-HOG pretraining");
  std::string pt_manifest, pt_out;
  pretrain->add_option("--manifest", pt_manifest)->required();
  pretrain->add_option("--out", pt_out, "output checkpoint")->required();

  // finetune
  auto* finetune_cmd = app.add_subcommand("finetune", "NetRVLAD metric-learning finetuning");
  std::string ft_manifest, ft_init, ft_pseudo, ft_out, ft_regime;
  bool ft_freeze = false;
  finetune_cmd->add_option("--manifest", ft_manifest)->required();
  finetune_cmd->add_option("--init", ft_init, "pretrained checkpoint (omit for from-scratch)");
  finetune_cmd->add_option("--pseudo-labels", ft_pseudo, "pseudo-label file for regime=cls");
  finetune_cmd->add_option("--regime", ft_regime, "supervised | cls")
      ->check(CLI::IsMember({"supervised", "cls"}));
  finetune_cmd->add_flag("--freeze-backbone", ft_freeze, "train only the encoding head");
  finetune_cmd->add_option("--out", ft_out, "output checkpoint")->required();

  // encode
  auto* encode = app.add_subcommand("encode", "per-page global descriptors");
  std::string en_manifest, en_ckpt, en_out;
  encode->add_option("--manifest", en_manifest)->required();
  encode->add_option("--checkpoint", en_ckpt)->required();
  encode->add_option("--out", en_out, "output prefix (.sghd / .index.jsonl)")->required();

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "leave-one-out retrieval metrics");
  std::string ev_manifest, ev_desc, ev_task = "writer", ev_metrics, ev_ranks;
  eval_cmd->add_option("--manifest", ev_manifest)->required();
  eval_cmd->add_option("--descriptors", ev_desc, "descriptor prefix from encode")->required();
  eval_cmd->add_option("--task", ev_task, "writer | page")->check(CLI::IsMember({"writer", "page"}));
  eval_cmd->add_option("--out", ev_metrics, "metrics JSON")->required();
  eval_cmd->add_option("--ranks", ev_ranks, "rank dump JSON lines (for report)");

  // report
  auto* report = app.add_subcommand("report", "HTML grid of queries and neighbors");
  std::string rp_manifest, rp_ranks, rp_out;
  int rp_topk = 4, rp_rows = 50;
  report->add_option("--manifest", rp_manifest)->required();
  report->add_option("--ranks", rp_ranks)->required();
  report->add_option("--out", rp_out)->required();
  report->add_option("--top-k", rp_topk);
  report->add_option("--max-rows", rp_rows);

  CLI11_PARSE(app, argc, argv);

  try {
    if (curate->parsed()) return cmd_curate(common, in_dir, masks_dir, out_manifest, eval_boxes);
    if (cluster->parsed()) return cmd_cluster(common, cl_manifest, cl_k, cl_out, cl_dump);
    if (pretrain->parsed()) return cmd_pretrain(common, pt_manifest, pt_out);
    if (finetune_cmd->parsed())
      return cmd_finetune(common, ft_manifest, ft_init, ft_pseudo, ft_out, ft_regime, ft_freeze);
    if (encode->parsed()) return cmd_encode(common, en_manifest, en_ckpt, en_out);
    if (eval_cmd->parsed())
      return cmd_eval(common, ev_manifest, ev_desc, ev_task, ev_metrics, ev_ranks);
    if (report->parsed())
      return cmd_report(common, rp_manifest, rp_ranks, rp_out, rp_topk, rp_rows);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
