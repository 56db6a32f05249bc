#include "cmac/pipeline.hpp"

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <istream>
#include <ostream>
#include <sstream>

#include "cmac/log.hpp"
#include "cmac/optimizer.hpp"

namespace cmac {

namespace {

constexpr std::uint64_t kTrainSplitSalt = 1;
constexpr std::uint64_t kTestSplitSalt = 2;
constexpr std::uint64_t kTrainProposalSalt = 3;
constexpr std::uint64_t kTestProposalSalt = 4;
constexpr std::uint64_t kTrainLoopSalt = 5;
constexpr std::uint64_t kGradcheckSalt = 6;

// Per-coordinate deviations used when target normalization is switched on.
constexpr double kTargetStd[4] = {0.1, 0.1, 0.2, 0.2};

Tensor targets_tensor(std::span<const RoiSample> rois, bool normalize) {
  Tensor t({rois.size(), 4});
  for (std::size_t r = 0; r < rois.size(); ++r) {
    for (std::size_t k = 0; k < 4; ++k) t.at(r, k) = rois[r].target[k] / (normalize ? kTargetStd[k] : 1.0);
  }
  return t;
}

}  // namespace

std::uint64_t stable_hash(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

SplitPaths split_paths(const RunConfig& cfg) {
  const auto root = cfg.data_path();
  return {root / "train", root / "test"};
}

std::pair<std::vector<DetectionSample>, std::vector<DetectionSample>> synthesize(const RunConfig& cfg) {
  const SceneSpec spec = cfg.scene_spec();
  auto split = [&](int count, std::uint64_t salt) {
    std::vector<DetectionSample> out;
    const std::uint64_t base = Rng::mix(cfg.seed, salt);
    for (int i = 0; i < count; ++i) {
      out.push_back(generate_scene(spec, Rng::mix(base, static_cast<std::uint64_t>(i))));
    }
    return out;
  };
  return {split(cfg.train_scenes, kTrainSplitSalt), split(cfg.test_scenes, kTestSplitSalt)};
}

std::vector<Box> train_proposals(const DetectionSample& sample, const RunConfig& cfg) {
  return make_proposals(sample.gts, cfg.train_per_gt, cfg.jitter(), cfg.train_background, cfg.image_size,
                        Rng::mix(stable_hash(sample.id), kTrainProposalSalt));
}

std::vector<Box> test_proposals(const DetectionSample& sample, const RunConfig& cfg) {
  return make_proposals(sample.gts, cfg.test_per_gt, cfg.jitter(), cfg.test_background, cfg.image_size,
                        Rng::mix(stable_hash(sample.id), kTestProposalSalt));
}

void write_train_header(std::ostream& os, const RunConfig& cfg) {
  os << "# momentum " << cfg.momentum << " base_lr " << cfg.lr << " decay " << cfg.lr_decay_factor << " every "
     << cfg.decay_every_epochs << " batch " << cfg.batch_size << " images " << cfg.images_per_batch << " fg_fraction "
     << cfg.fg_fraction << " flip_prob " << cfg.flip_prob << '\n';
  os << "# iter epoch loss loss_cls loss_loc lr fg bg images flips\n";
}

void write_train_step(std::ostream& os, const TrainStep& s) {
  std::ostringstream line;
  line << s.iter << ' ' << s.epoch << ' ' << std::setprecision(8) << s.loss << ' ' << s.loss_cls << ' '
       << s.loss_loc << ' ' << s.lr << ' ' << s.fg << ' ' << s.bg << ' ' << s.images << ' ' << s.flips << '\n';
  os << line.str();
}

std::vector<TrainStep> read_train_log(std::istream& is) {
  std::vector<TrainStep> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    TrainStep s;
    if (!(ls >> s.iter >> s.epoch >> s.loss >> s.loss_cls >> s.loss_loc >> s.lr >> s.fg >> s.bg >> s.images >>
          s.flips)) {
      throw FormatError("training log: malformed line '" + line + "'");
    }
    out.push_back(s);
  }
  return out;
}

TrainResult train_model(CmacModel& model, const RunConfig& cfg, std::span<const DetectionSample> train,
                        std::uint64_t seed, const TrainHooks& hooks) {
  const std::size_t per_image = static_cast<std::size_t>(cfg.batch_size / cfg.images_per_batch);
  const std::size_t ipb = static_cast<std::size_t>(cfg.images_per_batch);
  if (train.size() < ipb) throw ContractError("train: fewer training images than images_per_batch");

  std::vector<std::vector<Box>> proposals;
  proposals.reserve(train.size());
  for (const DetectionSample& s : train) proposals.push_back(train_proposals(s, cfg));

  auto params = model.parameters();
  OptimizerState opt(params, cfg.lr, cfg.momentum);
  Rng rng(Rng::mix(seed, kTrainLoopSalt));
  if (hooks.log) write_train_header(*hooks.log, cfg);

  TrainResult result;
  std::vector<std::size_t> order(train.size());
  int iter = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    opt.learning_rate = step_decay_lr(cfg.lr, cfg.lr_decay_factor, cfg.decay_every_epochs, epoch);
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (std::size_t k = order.size(); k > 1; --k) std::swap(order[k - 1], order[rng.below(k)]);
    double epoch_loss = 0.0;
    int epoch_steps = 0;
    for (std::size_t start = 0; start + ipb <= order.size(); start += ipb) {
      Tape tape;
      std::vector<Var> probs, offsets;
      std::vector<int> labels;
      std::vector<RoiSample> batch;
      TrainStep step;
      for (std::size_t j = 0; j < ipb; ++j) {
        const std::size_t idx = order[start + j];
        DetectionSample sample = train[idx];
        std::vector<Box> props = proposals[idx];
        if (flip_augment(sample, props, cfg.flip_prob, rng)) ++step.flips;
        auto rois = sample_rois(props, sample.gts, per_image, cfg.fg_fraction, rng, sample.id);
        std::vector<Box> boxes;
        for (const RoiSample& r : rois) {
          boxes.push_back(r.box);
          labels.push_back(r.label);
          (r.is_foreground ? step.fg : step.bg) += 1;
        }
        ImageOutput out = model.forward(tape, sample.rgb, sample.geo, boxes);
        probs.push_back(out.probs);
        offsets.push_back(out.offsets);
        batch.insert(batch.end(), rois.begin(), rois.end());
      }
      LossTerms loss = multitask_loss(concat_rows(probs), concat_rows(offsets), labels, targets_tensor(batch, cfg.normalize_targets));
      tape.backward(loss.total);
      for (Parameter* p : params) p->zero_grad();
      tape.accumulate_param_grads();
      sgd_momentum_step(params, opt);

      step.iter = iter++;
      step.epoch = epoch;
      step.loss = loss.total.value()[0];
      step.loss_cls = loss.cls.value()[0];
      step.loss_loc = loss.loc.value()[0];
      step.lr = opt.learning_rate;
      step.images = static_cast<int>(ipb);
      if (!std::isfinite(step.loss)) throw std::runtime_error("train: loss diverged at iteration " + std::to_string(step.iter));
      if (hooks.log) write_train_step(*hooks.log, step);
      epoch_loss += step.loss;
      ++epoch_steps;
      result.steps.push_back(step);
    }
    result.epoch_mean_loss.push_back(epoch_loss / std::max(1, epoch_steps));
    log::info("epoch " + std::to_string(epoch) + " mean loss " + std::to_string(result.epoch_mean_loss.back()));
    if (hooks.on_epoch_end) hooks.on_epoch_end(epoch, model);
  }
  return result;
}

Scores Detector::score(const DetectionSample& sample, std::span<const Box> rois) {
  std::vector<Scores> parts;
  for (CmacModel& m : members) parts.push_back(predict(m, sample.rgb, sample.geo, rois));
  return average_scores(parts);
}

Detector make_detector(const RunConfig& cfg, std::uint64_t seed) {
  Detector det;
  if (!cfg.use_depth_stream) {
    det.members.emplace_back(cfg.model_config(Modality::rgb), Rng::mix(seed, 11));
  } else if (cfg.use_cross_modal_fusion) {
    det.members.emplace_back(cfg.model_config(Modality::both), Rng::mix(seed, 10));
  } else {
    det.members.emplace_back(cfg.model_config(Modality::rgb), Rng::mix(seed, 11));
    det.members.emplace_back(cfg.model_config(Modality::depth), Rng::mix(seed, 12));
  }
  return det;
}

std::string member_name(const CmacModel& m) { return modality_name(m.config().modality); }

EvalResult evaluate(const Scorer& scorer, std::span<const DetectionSample> test, const RunConfig& cfg) {
  EvalResult result;
  std::vector<GroundTruth> gts;
  const double n = cfg.image_size;
  for (std::size_t img = 0; img < test.size(); ++img) {
    const DetectionSample& s = test[img];
    for (const LabeledBox& g : s.gts) gts.push_back({g.box, g.label, static_cast<int>(img)});
    const auto props = test_proposals(s, cfg);
    const Scores sc = scorer(s, props);
    std::vector<Detection> dets;
    for (std::size_t r = 0; r < props.size(); ++r) {
      // One refined box per proposal, from the offsets of its most likely object class.
      std::size_t best = 1;
      for (std::size_t c = 2; c <= static_cast<std::size_t>(cfg.C); ++c) {
        if (sc.probs.at(r, c) > sc.probs.at(r, best)) best = c;
      }
      Offsets o;
      for (std::size_t k = 0; k < 4; ++k) {
        o[k] = sc.offsets.at(r, 4 * (best - 1) + k) * (cfg.normalize_targets ? kTargetStd[k] : 1.0);
      }
      const Box b = decode_box(props[r], o).clipped(n, n);
      if (b.area() <= 0.0) continue;
      for (int c = 1; c <= cfg.C; ++c) {
        const double p = sc.probs.at(r, static_cast<std::size_t>(c));
        if (p >= cfg.score_floor) dets.push_back({b, c, p, static_cast<int>(img)});
      }
    }
    auto kept = nms(dets, cfg.nms_thresh);
    result.detections.insert(result.detections.end(), kept.begin(), kept.end());
  }
  for (int c = 1; c <= cfg.C; ++c) result.ap[c] = average_precision(result.detections, gts, c);
  result.map = mean_ap(result.ap);
  return result;
}

std::size_t export_attention(CmacModel& model, std::span<const DetectionSample> test, const RunConfig& cfg,
                             const std::filesystem::path& dir) {
  if (!model.config().use_global) throw ContractError("export_attention: model has no global attention module");
  std::filesystem::create_directories(dir);
  std::size_t written = 0;
  for (std::size_t img = 0; img < test.size(); ++img) {
    const DetectionSample& s = test[img];
    const auto props = test_proposals(s, cfg);
    Tape tape(false);
    ImageOutput out = model.forward(tape, s.rgb, s.geo, props);
    for (std::size_t r = 0; r < props.size(); ++r) {
      AttentionTrace trace = extract_trace(*out.global, r, model.config().K);
      std::vector<Box> windows;
      for (const Var& theta : out.parts->thetas) {
        windows.push_back(part_window(props[r], theta.value().at(r, 0), theta.value().at(r, 1)));
      }
      std::ostringstream name;
      name << "img" << std::setw(4) << std::setfill('0') << img << "_roi" << std::setw(4) << r << ".pgm";
      export_attention_map(trace, cfg.image_size, cfg.image_size, dir / name.str(), props[r], windows);
      ++written;
    }
  }
  return written;
}

const std::vector<AblationVariant>& ablation_variants() {
  static const std::vector<AblationVariant> v = {
      {"baseline", false, false, false},
      {"+L", false, true, false},
      {"+G", true, false, false},
      {"+G+L", true, true, false},
      {"+G+L+fusion", true, true, true},
  };
  return v;
}

double AblationTable::mean(std::size_t variant) const {
  const auto& row = map.at(variant);
  double s = 0.0;
  for (double v : row) s += v;
  return row.empty() ? 0.0 : s / static_cast<double>(row.size());
}

std::string ablation_log_name(const std::string& variant, std::uint64_t seed, const std::string& member) {
  std::string v = variant;
  std::replace(v.begin(), v.end(), '+', 'p');
  return "train_" + v + "_seed" + std::to_string(seed) + "_" + member + ".log";
}

AblationTable run_ablation(const RunConfig& cfg, std::span<const DetectionSample> train,
                           std::span<const DetectionSample> test, std::ostream* progress,
                           const std::filesystem::path& log_dir) {
  if (!log_dir.empty()) std::filesystem::create_directories(log_dir);
  AblationTable table;
  for (int k = 0; k < cfg.ablate_seeds; ++k) table.seeds.push_back(cfg.seed + static_cast<std::uint64_t>(k));
  for (const AblationVariant& v : ablation_variants()) {
    RunConfig vc = cfg;
    vc.use_global_attention = v.global;
    vc.use_part_attention = v.part;
    vc.use_depth_stream = true;
    vc.use_cross_modal_fusion = v.fusion;
    table.variants.push_back(v.name);
    std::vector<double> row;
    const std::uint64_t calls_before = attention_module_calls();
    for (std::uint64_t seed : table.seeds) {
      Detector det = make_detector(vc, seed);
      for (CmacModel& m : det.members) {
        std::ofstream log;
        TrainHooks hooks;
        if (!log_dir.empty()) {
          const auto path = log_dir / ablation_log_name(v.name, seed, member_name(m));
          log.open(path);
          if (!log) throw std::runtime_error("cannot write " + path.string());
          hooks.log = &log;
        }
        train_model(m, vc, train, seed, hooks);
      }
      const EvalResult r = evaluate([&](const DetectionSample& s, std::span<const Box> b) { return det.score(s, b); },
                                    test, vc);
      row.push_back(r.map);
      if (progress) {
        *progress << "ablate " << v.name << " seed " << seed << " mAP " << std::fixed << std::setprecision(4) << r.map
                  << std::defaultfloat << std::endl;
      }
    }
    table.map.push_back(row);
    table.attention_calls.push_back(attention_module_calls() - calls_before);
  }
  return table;
}

void write_ablation_table(std::ostream& os, const AblationTable& table) {
  os << std::left << std::setw(14) << "variant" << std::right;
  for (std::uint64_t s : table.seeds) os << std::setw(10) << ("seed" + std::to_string(s));
  os << std::setw(10) << "mean" << '\n';
  os << std::fixed << std::setprecision(2);
  for (std::size_t v = 0; v < table.variants.size(); ++v) {
    os << std::left << std::setw(14) << table.variants[v] << std::right;
    for (double m : table.map[v]) os << std::setw(10) << 100.0 * m;
    os << std::setw(10) << 100.0 * table.mean(v) << '\n';
  }
  os << std::defaultfloat;
}

std::vector<SweepRow> run_sweep(const RunConfig& cfg, const std::string& key, const std::vector<int>& values,
                                std::span<const DetectionSample> train, std::span<const DetectionSample> test,
                                std::ostream* progress) {
  if (key != "T_steps" && key != "N_stn") throw ConfigError("sweep: unsupported key '" + key + "'");
  std::vector<SweepRow> rows;
  for (int value : values) {
    RunConfig vc = cfg;
    vc.set(key, std::to_string(value));
    vc.validate();
    Detector det = make_detector(vc, cfg.seed);
    for (CmacModel& m : det.members) train_model(m, vc, train, cfg.seed);
    SweepRow row{value, evaluate([&](const DetectionSample& s, std::span<const Box> b) { return det.score(s, b); },
                                 test, vc)};
    if (progress) *progress << "sweep " << key << "=" << value << " mAP " << row.result.map << std::endl;
    rows.push_back(std::move(row));
  }
  return rows;
}

void write_sweep_report(std::ostream& os, const std::string& key, std::span<const SweepRow> rows, int classes) {
  os << std::left << std::setw(10) << key << std::right;
  for (int c = 1; c <= classes; ++c) os << std::setw(9) << ("AP" + std::to_string(c));
  os << std::setw(9) << "mAP" << '\n';
  os << std::fixed << std::setprecision(2);
  for (const SweepRow& r : rows) {
    os << std::left << std::setw(10) << r.value << std::right;
    for (int c = 1; c <= classes; ++c) {
      const auto it = r.result.ap.find(c);
      if (it != r.result.ap.end() && it->second) {
        os << std::setw(9) << 100.0 * *it->second;
      } else {
        os << std::setw(9) << "n/a";
      }
    }
    os << std::setw(9) << 100.0 * r.result.map << '\n';
  }
  os << std::defaultfloat;
}

std::vector<GroupReport> run_gradcheck(const RunConfig& cfg, std::uint64_t seed) {
  RunConfig gc = cfg;
  gc.use_global_attention = true;
  gc.use_part_attention = true;
  CmacModel model(gc.model_config(Modality::both), Rng::mix(seed, kGradcheckSalt));
  SceneSpec spec = gc.scene_spec();
  DetectionSample sample = generate_scene(spec, Rng::mix(seed, kGradcheckSalt + 1));
  const auto props = train_proposals(sample, gc);
  Rng rng(Rng::mix(seed, kGradcheckSalt + 2));
  const auto rois = sample_rois(props, sample.gts, static_cast<std::size_t>(gc.gradcheck_rois), 0.5, rng, sample.id);
  std::vector<Box> boxes;
  std::vector<int> labels;
  for (const RoiSample& r : rois) {
    boxes.push_back(r.box);
    labels.push_back(r.label);
  }
  const Tensor targets = targets_tensor(rois, gc.normalize_targets);
  auto params = model.parameters();
  LossFunction f = [&](bool with_backward) {
    Tape tape(with_backward);
    ImageOutput out = model.forward(tape, sample.rgb, sample.geo, boxes);
    LossTerms loss = multitask_loss(out.probs, out.offsets, labels, targets);
    if (with_backward) {
      tape.backward(loss.total);
      tape.accumulate_param_grads();
    }
    return LossEvaluation{loss.total.value()[0], tape.branch_signature()};
  };
  GradcheckOptions opts;
  opts.coords_per_group = static_cast<std::size_t>(gc.gradcheck_coords);
  opts.tolerance = gc.gradcheck_tolerance;
  opts.seed = Rng::mix(seed, kGradcheckSalt + 3);
  return check_gradients(f, params, opts);
}

}  // namespace cmac
