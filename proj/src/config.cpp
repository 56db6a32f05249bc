#include "cmac/config.hpp"

#include <charconv>
#include <fstream>
#include <iomanip>
#include <functional>
#include <map>
#include <ostream>
#include <sstream>

namespace cmac {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw ConfigError("config: '" + key + "' expects a number, got '" + v + "'");
  }
  return out;
}

double parse_real(const std::string& key, const std::string& v) {
  // from_chars for double is missing from older libstdc++ builds.
  std::istringstream is(v);
  double out = 0.0;
  char extra;
  if (!(is >> out) || (is >> extra)) throw ConfigError("config: '" + key + "' expects a real, got '" + v + "'");
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "off" || v == "no") return false;
  throw ConfigError("config: '" + key + "' expects true/false, got '" + v + "'");
}

struct Field {
  std::function<void(RunConfig&, const std::string&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <typename T>
std::string show(const T& v) {
  std::ostringstream os;
  os << std::boolalpha << std::setprecision(17) << v;
  return os.str();
}

const std::map<std::string, Field>& fields() {
  static const std::map<std::string, Field> table = [] {
    std::map<std::string, Field> m;
    auto int_field = [&](const char* name, int RunConfig::*member) {
      m[name] = {[member](RunConfig& c, const std::string& k, const std::string& v) { c.*member = parse_number<int>(k, v); },
                 [member](const RunConfig& c) { return show(c.*member); }};
    };
    auto real_field = [&](const char* name, double RunConfig::*member) {
      m[name] = {[member](RunConfig& c, const std::string& k, const std::string& v) { c.*member = parse_real(k, v); },
                 [member](const RunConfig& c) { return show(c.*member); }};
    };
    auto bool_field = [&](const char* name, bool RunConfig::*member) {
      m[name] = {[member](RunConfig& c, const std::string& k, const std::string& v) { c.*member = parse_bool(k, v); },
                 [member](const RunConfig& c) { return show(c.*member); }};
    };
    auto string_field = [&](const char* name, std::string RunConfig::*member) {
      m[name] = {[member](RunConfig& c, const std::string&, const std::string& v) { c.*member = v; },
                 [member](const RunConfig& c) { return c.*member; }};
    };
    int_field("K", &RunConfig::K);
    int_field("S", &RunConfig::S);
    int_field("D", &RunConfig::D);
    int_field("d", &RunConfig::d);
    int_field("d_fc", &RunConfig::d_fc);
    int_field("T_steps", &RunConfig::T_steps);
    int_field("N_stn", &RunConfig::N_stn);
    int_field("C", &RunConfig::C);
    int_field("backbone_channels", &RunConfig::backbone_channels);
    bool_field("fan_in_init", &RunConfig::fan_in_init);
    real_field("fc_std", &RunConfig::fc_std);
    real_field("conv_std", &RunConfig::conv_std);
    real_field("modality_gain", &RunConfig::modality_gain);
    real_field("context_gain", &RunConfig::context_gain);
    real_field("part_gain", &RunConfig::part_gain);
    int_field("batch_size", &RunConfig::batch_size);
    real_field("fg_fraction", &RunConfig::fg_fraction);
    int_field("images_per_batch", &RunConfig::images_per_batch);
    real_field("lr", &RunConfig::lr);
    real_field("momentum", &RunConfig::momentum);
    real_field("lr_decay_factor", &RunConfig::lr_decay_factor);
    int_field("decay_every_epochs", &RunConfig::decay_every_epochs);
    int_field("epochs", &RunConfig::epochs);
    real_field("flip_prob", &RunConfig::flip_prob);
    m["seed"] = {[](RunConfig& c, const std::string& k, const std::string& v) { c.seed = parse_number<std::uint64_t>(k, v); },
                 [](const RunConfig& c) { return show(c.seed); }};
    bool_field("use_global_attention", &RunConfig::use_global_attention);
    bool_field("use_part_attention", &RunConfig::use_part_attention);
    bool_field("use_depth_stream", &RunConfig::use_depth_stream);
    bool_field("use_cross_modal_fusion", &RunConfig::use_cross_modal_fusion);
    int_field("image_size", &RunConfig::image_size);
    int_field("train_scenes", &RunConfig::train_scenes);
    int_field("test_scenes", &RunConfig::test_scenes);
    real_field("occlusion_prob", &RunConfig::occlusion_prob);
    real_field("room_class_bias", &RunConfig::room_class_bias);
    int_field("train_per_gt", &RunConfig::train_per_gt);
    int_field("train_background", &RunConfig::train_background);
    int_field("test_per_gt", &RunConfig::test_per_gt);
    int_field("test_background", &RunConfig::test_background);
    real_field("jitter_shift", &RunConfig::jitter_shift);
    real_field("jitter_scale", &RunConfig::jitter_scale);
    real_field("nms_thresh", &RunConfig::nms_thresh);
    real_field("score_floor", &RunConfig::score_floor);
    bool_field("normalize_targets", &RunConfig::normalize_targets);
    int_field("ablate_seeds", &RunConfig::ablate_seeds);
    int_field("gradcheck_rois", &RunConfig::gradcheck_rois);
    int_field("gradcheck_coords", &RunConfig::gradcheck_coords);
    real_field("gradcheck_tolerance", &RunConfig::gradcheck_tolerance);
    string_field("data_dir", &RunConfig::data_dir);
    string_field("out_dir", &RunConfig::out_dir);
    string_field("checkpoint", &RunConfig::checkpoint);
    return m;
  }();
  return table;
}

}  // namespace

void RunConfig::set(const std::string& key, const std::string& value) {
  const auto it = fields().find(key);
  if (it == fields().end()) throw ConfigError("config: unknown key '" + key + "'");
  it->second.set(*this, key, value);
}

void RunConfig::validate() const {
  for (int v : {K, S, D, d, d_fc, T_steps, N_stn, C, backbone_channels, batch_size, images_per_batch, epochs,
                decay_every_epochs, image_size, train_per_gt, test_per_gt, ablate_seeds, gradcheck_rois,
                gradcheck_coords}) {
    if (v <= 0) throw ConfigError("config: dimensions and counts must be positive");
  }
  if (train_scenes < 0 || test_scenes < 0 || train_background < 0 || test_background < 0) {
    throw ConfigError("config: scene and proposal counts must be nonnegative");
  }
  if (batch_size % images_per_batch != 0) throw ConfigError("config: batch_size must divide evenly by images_per_batch");
  if (!(fg_fraction > 0.0 && fg_fraction <= 1.0)) throw ConfigError("config: fg_fraction must lie in (0, 1]");
  if (!(lr > 0.0)) throw ConfigError("config: lr must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("config: momentum must lie in [0, 1)");
  if (!(flip_prob >= 0.0 && flip_prob <= 1.0)) throw ConfigError("config: flip_prob must lie in [0, 1]");
  if (!(nms_thresh > 0.0 && nms_thresh < 1.0)) throw ConfigError("config: nms_thresh must lie in (0, 1)");
  if (!(fc_std > 0.0 && conv_std > 0.0)) throw ConfigError("config: init deviations must be positive");
  if (!(modality_gain >= 0.0 && context_gain >= 0.0 && part_gain > 0.0)) {
    throw ConfigError("config: modality_gain and context_gain must be >= 0, part_gain > 0");
  }
  if (!(gradcheck_tolerance > 0.0)) throw ConfigError("config: gradcheck_tolerance must be positive");
  try {
    scene_spec().validate();
  } catch (const ContractError& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  if (K > image_size / 4) throw ConfigError("config: K exceeds the feature map size");
}

ModelConfig RunConfig::model_config(Modality modality) const {
  ModelConfig m;
  m.classes = static_cast<std::size_t>(C);
  m.K = static_cast<std::size_t>(K);
  m.S = static_cast<std::size_t>(S);
  m.D = static_cast<std::size_t>(D);
  m.d = static_cast<std::size_t>(d);
  m.d_fc = static_cast<std::size_t>(d_fc);
  m.steps = static_cast<std::size_t>(T_steps);
  m.transformers = static_cast<std::size_t>(N_stn);
  m.backbone_channels = static_cast<std::size_t>(backbone_channels);
  m.modality_gain = modality_gain;
  m.context_gain = context_gain;
  m.part_gain = part_gain;
  m.use_global = use_global_attention;
  m.use_part = use_part_attention;
  m.modality = modality;
  m.init = InitScheme{fan_in_init, fc_std, conv_std};
  return m;
}

SceneSpec RunConfig::scene_spec() const {
  SceneSpec s;
  s.image_size = image_size;
  s.classes = C;
  s.occlusion_prob = occlusion_prob;
  s.room_class_bias = room_class_bias;
  const double scale = image_size / 64.0;
  s.fx = s.fy = 64.0 * scale;
  s.cx = s.cy = 0.5 * image_size;
  s.min_object_px = 12.0 * scale;
  s.max_object_px = 24.0 * scale;
  return s;
}

ProposalJitter RunConfig::jitter() const { return ProposalJitter{jitter_shift, jitter_scale}; }

std::filesystem::path RunConfig::data_path() const {
  if (!data_dir.empty()) return data_dir;
  return std::filesystem::path(out_dir) / "data";
}

RunConfig load_config(const std::filesystem::path& path, RunConfig base) {
  std::ifstream is(path);
  if (!is) throw ConfigError("config: cannot open " + path.string());
  std::string line;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(path.string() + ":" + std::to_string(line_no) + ": expected 'key = value'");
    }
    base.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return base;
}

void apply_override(RunConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("override '" + assignment + "' is not key=value");
  cfg.set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

void write_config(std::ostream& os, const RunConfig& cfg) {
  for (const auto& [key, field] : fields()) os << key << " = " << field.get(cfg) << '\n';
}

}  // namespace cmac
