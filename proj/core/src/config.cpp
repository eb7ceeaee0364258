#include "resdense/config.hpp"

#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include "json.hpp"

namespace resdense {

namespace {

using json = nlohmann::ordered_json;

// Walks one JSON object, recording every problem instead of stopping at the
// first one.
class Reader {
 public:
  Reader(const json& node, std::string path, std::vector<std::string>& errors)
      : node_(node), path_(std::move(path)), errors_(errors) {}

  ~Reader() {
    if (!node_.is_object()) return;
    for (const auto& [key, value] : node_.items()) {
      if (!known_.contains(key)) errors_.push_back(at(key) + ": unknown key");
    }
  }

  Reader(const Reader&) = delete;
  Reader& operator=(const Reader&) = delete;

  std::string at(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  void size(const std::string& key, std::size_t& out) {
    if (const json* v = take(key)) {
      if (v->is_number_unsigned()) {
        out = v->get<std::size_t>();
      } else if (v->is_number_integer()) {
        errors_.push_back(at(key) + ": must be non-negative");
      } else {
        type_error(key, "a non-negative integer");
      }
    }
  }

  void u64(const std::string& key, std::uint64_t& out) {
    if (const json* v = take(key)) {
      if (v->is_number_unsigned()) {
        out = v->get<std::uint64_t>();
      } else {
        type_error(key, "a non-negative integer");
      }
    }
  }

  void number(const std::string& key, double& out) {
    if (const json* v = take(key)) {
      if (v->is_number()) {
        out = v->get<double>();
      } else {
        type_error(key, "a number");
      }
    }
  }

  void boolean(const std::string& key, bool& out) {
    if (const json* v = take(key)) {
      if (v->is_boolean()) {
        out = v->get<bool>();
      } else {
        type_error(key, "a boolean");
      }
    }
  }

  void string(const std::string& key, std::string& out) {
    if (const json* v = take(key)) {
      if (v->is_string()) {
        out = v->get<std::string>();
      } else {
        type_error(key, "a string");
      }
    }
  }

  template <typename E>
  void choice(const std::string& key, E& out, const std::map<std::string, E>& options) {
    if (const json* v = take(key)) {
      if (!v->is_string()) return type_error(key, "a string");
      const auto it = options.find(v->get<std::string>());
      if (it == options.end()) {
        std::string names;
        for (const auto& [name, value] : options) names += (names.empty() ? "" : ", ") + name;
        errors_.push_back(at(key) + ": '" + v->get<std::string>() + "' is not one of " + names);
        return;
      }
      out = it->second;
    }
  }

  void object(const std::string& key, const std::function<void(Reader&)>& body) {
    if (const json* v = take(key)) {
      if (!v->is_object()) return type_error(key, "an object");
      Reader child(*v, at(key), errors_);
      body(child);
    }
  }

  void size_list(const std::string& key, std::vector<std::size_t>& out) {
    if (const json* v = take(key)) {
      if (!v->is_array()) return type_error(key, "an array of non-negative integers");
      std::vector<std::size_t> values;
      for (const auto& item : *v) {
        if (!item.is_number_unsigned()) return type_error(key, "an array of non-negative integers");
        values.push_back(item.get<std::size_t>());
      }
      out = std::move(values);
    }
  }

  void object_list(const std::string& key, const std::function<void(Reader&, std::size_t)>& body) {
    if (const json* v = take(key)) {
      if (!v->is_array()) return type_error(key, "an array of objects");
      for (std::size_t i = 0; i < v->size(); ++i) {
        const std::string item_path = at(key) + "[" + std::to_string(i) + "]";
        if (!(*v)[i].is_object()) {
          errors_.push_back(item_path + ": must be an object");
          continue;
        }
        Reader child((*v)[i], item_path, errors_);
        body(child, i);
      }
    }
  }

  bool has(const std::string& key) const { return node_.is_object() && node_.contains(key); }

 private:
  const json* take(const std::string& key) {
    known_.insert(key);
    if (!node_.is_object() || !node_.contains(key)) return nullptr;
    return &node_.at(key);
  }

  void type_error(const std::string& key, const char* expected) {
    errors_.push_back(at(key) + ": must be " + expected);
  }

  const json& node_;
  std::string path_;
  std::vector<std::string>& errors_;
  std::set<std::string> known_;
};

const std::map<std::string, BackboneKind> kBackboneKinds{{"resnet", BackboneKind::resnet},
                                                         {"densenet", BackboneKind::densenet}};
const std::map<std::string, PoolingKind> kPoolings{{"gap", PoolingKind::gap}, {"gem", PoolingKind::gem}};
const std::map<std::string, HeadKind> kHeads{{"sigmoid_binary", HeadKind::sigmoid_binary},
                                             {"softmax2", HeadKind::softmax2}};
const std::map<std::string, OptimizerKind> kOptimizers{{"rmsprop", OptimizerKind::rmsprop},
                                                       {"adam", OptimizerKind::adam}};
const std::map<std::string, LossKind> kLosses{{"binary_ce", LossKind::binary_ce},
                                              {"categorical_ce", LossKind::categorical_ce}};

void read_backbone(Reader& r, BackboneSpec& spec) {
  r.choice("kind", spec.kind, kBackboneKinds);
  r.size("input_channels", spec.input_channels);
  r.size("stem_channels", spec.stem_channels);
  r.size("stem_kernel", spec.stem_kernel);
  if (spec.kind == BackboneKind::resnet) {
    if (r.has("stages")) {
      std::vector<ResNetStage> stages;
      r.object_list("stages", [&](Reader& s, std::size_t) {
        ResNetStage stage;
        s.size("blocks", stage.blocks);
        s.size("channels", stage.channels);
        s.size("stride", stage.stride);
        stages.push_back(stage);
      });
      spec.stages = std::move(stages);
    }
    r.boolean("bottleneck", spec.bottleneck);
  } else {
    r.size_list("dense_layers", spec.dense_layers);
    r.size("growth_rate", spec.growth_rate);
    r.number("compression", spec.compression);
  }
}

void read_model(Reader& r, ModelConfig& m) {
  r.object("resnet", [&](Reader& b) { read_backbone(b, m.resnet); });
  r.object("densenet", [&](Reader& b) { read_backbone(b, m.densenet); });
  r.size("fusion_channels", m.fusion_channels);
  r.choice("pooling", m.pooling, kPoolings);
  r.number("gem_p", m.gem_p);
  r.choice("head", m.head, kHeads);
  std::vector<std::size_t> input_size{m.input_height, m.input_width};
  r.size_list("input_size", input_size);
  if (input_size.size() == 2) {
    m.input_height = input_size[0];
    m.input_width = input_size[1];
  } else {
    m.input_height = 0;  // reported by validation
  }
}

void read_train(Reader& r, TrainConfig& t) {
  r.size("batch_size", t.batch_size);
  r.size("epochs", t.epochs);
  r.number("learning_rate", t.learning_rate);
  r.choice("optimizer", t.optimizer, kOptimizers);
  r.choice("loss", t.loss, kLosses);
  r.number("stage1_fraction", t.stage1_fraction);
  r.number("stage2_unfreeze_fraction", t.stage2_unfreeze_fraction);
  r.object("rmsprop", [&](Reader& o) {
    o.number("rho", t.rmsprop.rho);
    o.number("epsilon", t.rmsprop.epsilon);
  });
  r.object("adam", [&](Reader& o) {
    o.number("beta1", t.adam.beta1);
    o.number("beta2", t.adam.beta2);
    o.number("epsilon", t.adam.epsilon);
  });
}

void read_data(Reader& r, DataConfig& d) {
  std::string root = d.root.string();
  r.string("root", root);
  d.root = root;
  r.number("split_ratio", d.split_ratio);
  r.object("augment", [&](Reader& a) {
    a.boolean("enabled", d.augment.enabled);
    a.boolean("horizontal_flip", d.augment.horizontal_flip);
    a.boolean("vertical_flip", d.augment.vertical_flip);
    a.number("rotation_factor", d.augment.rotation_factor);
  });
}

json backbone_json(const BackboneSpec& spec) {
  json j;
  j["kind"] = to_string(spec.kind);
  j["input_channels"] = spec.input_channels;
  j["stem_channels"] = spec.stem_channels;
  j["stem_kernel"] = spec.stem_kernel;
  if (spec.kind == BackboneKind::resnet) {
    j["stages"] = json::array();
    for (const auto& s : spec.stages) {
      j["stages"].push_back({{"blocks", s.blocks}, {"channels", s.channels}, {"stride", s.stride}});
    }
    j["bottleneck"] = spec.bottleneck;
  } else {
    j["dense_layers"] = spec.dense_layers;
    j["growth_rate"] = spec.growth_rate;
    j["compression"] = spec.compression;
  }
  return j;
}

json model_json(const ModelConfig& m) {
  json j;
  j["resnet"] = backbone_json(m.resnet);
  j["densenet"] = backbone_json(m.densenet);
  j["fusion_channels"] = m.fusion_channels;
  j["pooling"] = to_string(m.pooling);
  j["gem_p"] = m.gem_p;
  j["head"] = to_string(m.head);
  j["input_size"] = {m.input_height, m.input_width};
  return j;
}

json parse_json(std::string_view text) {
  try {
    return json::parse(text.begin(), text.end());
  } catch (const json::parse_error& e) {
    throw ConfigError({std::string("malformed JSON: ") + e.what()});
  }
}

}  // namespace

std::vector<std::string> RunConfig::validate() const {
  std::vector<std::string> v = model.validate();
  const auto tv = train.validate();
  v.insert(v.end(), tv.begin(), tv.end());
  const bool sigmoid_head = model.head == HeadKind::sigmoid_binary;
  if (sigmoid_head != (train.loss == LossKind::binary_ce)) {
    v.push_back("train.loss: " + to_string(train.loss) + " is incompatible with model.head " +
                to_string(model.head) + " (binary_ce pairs with sigmoid_binary, categorical_ce with softmax2)");
  }
  if (!(data.split_ratio > 0.0 && data.split_ratio < 1.0)) v.push_back("data.split_ratio: must be in (0, 1)");
  if (!(data.augment.rotation_factor >= 0.0 && data.augment.rotation_factor <= 0.5)) {
    v.push_back("data.augment.rotation_factor: must be in [0, 0.5]");
  }
  if (output_dir.empty()) v.push_back("output_dir: must not be empty");
  return v;
}

std::vector<std::string> RunConfig::validate_paths() const {
  std::vector<std::string> v;
  if (data.root.empty()) {
    v.push_back("data.root: no dataset directory given");
  } else if (!std::filesystem::is_directory(data.root)) {
    v.push_back("data.root: directory " + data.root.string() + " does not exist");
  }
  return v;
}

RunConfig parse_run_config(std::string_view json_text) {
  const json root = parse_json(json_text);
  if (!root.is_object()) throw ConfigError({"config: top level must be a JSON object"});
  RunConfig cfg;
  std::vector<std::string> errors;
  {
    Reader r(root, "", errors);
    r.u64("seed", cfg.seed);
    std::string out = cfg.output_dir.string();
    r.string("output_dir", out);
    cfg.output_dir = out;
    r.object("model", [&](Reader& m) { read_model(m, cfg.model); });
    r.object("train", [&](Reader& t) { read_train(t, cfg.train); });
    r.object("data", [&](Reader& d) { read_data(d, cfg.data); });
  }
  cfg.train.seed = cfg.seed;
  const auto invalid = cfg.validate();
  errors.insert(errors.end(), invalid.begin(), invalid.end());
  if (!errors.empty()) throw ConfigError(std::move(errors));
  return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read config " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_run_config(buf.str());
}

std::string run_config_to_json(const RunConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["output_dir"] = c.output_dir.string();
  j["model"] = model_json(c.model);
  const auto& t = c.train;
  j["train"] = {{"batch_size", t.batch_size},
                {"epochs", t.epochs},
                {"learning_rate", t.learning_rate},
                {"optimizer", to_string(t.optimizer)},
                {"loss", to_string(t.loss)},
                {"stage1_fraction", t.stage1_fraction},
                {"stage2_unfreeze_fraction", t.stage2_unfreeze_fraction},
                {"rmsprop", {{"rho", t.rmsprop.rho}, {"epsilon", t.rmsprop.epsilon}}},
                {"adam", {{"beta1", t.adam.beta1}, {"beta2", t.adam.beta2}, {"epsilon", t.adam.epsilon}}}};
  const auto& a = c.data.augment;
  j["data"] = {{"root", c.data.root.string()},
               {"split_ratio", c.data.split_ratio},
               {"augment",
                {{"enabled", a.enabled},
                 {"horizontal_flip", a.horizontal_flip},
                 {"vertical_flip", a.vertical_flip},
                 {"rotation_factor", a.rotation_factor}}}};
  return j.dump(2) + "\n";
}

std::string model_config_to_json(const ModelConfig& config) { return model_json(config).dump(); }

ModelConfig parse_model_config(std::string_view json_text) {
  const json root = parse_json(json_text);
  if (!root.is_object()) throw ConfigError({"model: must be a JSON object"});
  ModelConfig m;
  std::vector<std::string> errors;
  {
    Reader r(root, "model", errors);
    read_model(r, m);
  }
  const auto invalid = m.validate();
  errors.insert(errors.end(), invalid.begin(), invalid.end());
  if (!errors.empty()) throw ConfigError(std::move(errors));
  return m;
}

}  // namespace resdense
