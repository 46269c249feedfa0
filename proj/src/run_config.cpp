#include "ctrlgen/run_config.hpp"

#include <cstdio>
#include <functional>

#include "ctrlgen/tensor_io.hpp"

namespace ctrlgen {

namespace {

using Setter = std::function<void(const Json&)>;

// Applies every key of `obj` through `setters`; anything else is an error.
void apply_object(const Json& obj, const std::string& where, const std::map<std::string, Setter>& setters) {
  if (!obj.is_object()) throw ConfigError("config: '" + where + "' must be an object");
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    auto s = setters.find(it.key());
    if (s == setters.end()) throw ConfigError("config: unknown key '" + where + "." + it.key() + "'");
    try {
      s->second(it.value());
    } catch (const Json::exception&) {
      throw ConfigError("config: bad value for '" + where + "." + it.key() + "'");
    }
  }
}

template <class T>
Setter set(T& field) {
  return [&field](const Json& v) {
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw Json::type_error::create(302, "expected boolean", &v);
    } else if constexpr (std::is_unsigned_v<T> || std::is_integral_v<T>) {
      if (!v.is_number_integer()) throw Json::type_error::create(302, "expected integer", &v);
      if constexpr (std::is_unsigned_v<T>) {
        if (v.is_number_integer() && !v.is_number_unsigned() && v.get<long long>() < 0) {
          throw Json::type_error::create(302, "expected non-negative integer", &v);
        }
      }
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw Json::type_error::create(302, "expected number", &v);
    }
    field = v.get<T>();
  };
}

Json ids_json(const std::vector<TokenId>& ids) {
  Json a = Json::array();
  for (TokenId id : ids) a.push_back(id);
  return a;
}

}  // namespace

Json to_json(const SynthSpec& s) {
  Json j;
  j["vocab_size"] = s.vocab_size;
  j["s1"] = ids_json(s.s1);
  j["s0"] = ids_json(s.s0);
  j["beta"] = s.beta;
  j["min_len"] = s.min_len;
  j["max_len"] = s.max_len;
  j["seed"] = s.seed;
  j["partition_seed"] = s.partition_seed;
  j["attribute"] = s.attribute;
  return j;
}

Json to_json(const BackboneTrainConfig& c) {
  Json j;
  j["epochs"] = c.epochs;
  j["lr"] = c.lr;
  j["seed"] = c.seed;
  j["d_h"] = c.d_h;
  j["d_e"] = c.d_e;
  j["init_scale"] = c.init_scale;
  j["clip_norm"] = c.clip_norm;
  return j;
}

Json to_json(const TrainConfig& c) {
  Json j;
  j["lr"] = c.lr;
  j["batch_size"] = c.batch_size;
  j["epochs"] = c.epochs;
  j["beta1"] = c.beta1;
  j["beta2"] = c.beta2;
  j["eps"] = c.eps;
  j["weight_decay"] = c.weight_decay;
  j["seed"] = c.seed;
  j["kd_enabled"] = c.kd_enabled;
  j["init_scale"] = c.init_scale ? Json(*c.init_scale) : Json(nullptr);
  return j;
}

Json to_json(const SamplerConfig& c) {
  Json j;
  j["lambda"] = c.lambda;
  j["rho1"] = c.rho1;
  j["rho2"] = c.rho2;
  j["max_len"] = c.max_len;
  j["seed"] = c.seed;
  j["mode"] = to_string(c.mode);
  j["stop_at_eos"] = c.stop_at_eos;
  return j;
}

Json to_json(const RunConfig& c) {
  Json j;
  j["spec"] = to_json(c.spec);
  j["backbone"] = to_json(c.backbone);
  j["train"] = to_json(c.train);
  j["sampler"] = to_json(c.sampler);
  j["n_per_class"] = c.n_per_class;
  Json p = Json::object();
  for (const auto& [k, v] : c.paths) p[k] = v;
  j["paths"] = p;
  return j;
}

RunConfig apply_json(const Json& j, RunConfig cfg) {
  auto& s = cfg.spec;
  auto& b = cfg.backbone;
  auto& t = cfg.train;
  auto& m = cfg.sampler;
  std::map<std::string, Setter> top{
      {"spec",
       [&](const Json& v) {
         apply_object(v, "spec", {{"vocab_size", set(s.vocab_size)},
                                  {"s1", set(s.s1)},
                                  {"s0", set(s.s0)},
                                  {"beta", set(s.beta)},
                                  {"min_len", set(s.min_len)},
                                  {"max_len", set(s.max_len)},
                                  {"seed", set(s.seed)},
                                  {"partition_seed", set(s.partition_seed)},
                                  {"attribute", set(s.attribute)}});
       }},
      {"backbone",
       [&](const Json& v) {
         apply_object(v, "backbone", {{"epochs", set(b.epochs)},
                                      {"lr", set(b.lr)},
                                      {"seed", set(b.seed)},
                                      {"d_h", set(b.d_h)},
                                      {"d_e", set(b.d_e)},
                                      {"init_scale", set(b.init_scale)},
                                      {"clip_norm", set(b.clip_norm)}});
       }},
      {"train",
       [&](const Json& v) {
         apply_object(v, "train",
                      {{"lr", set(t.lr)},
                       {"batch_size", set(t.batch_size)},
                       {"epochs", set(t.epochs)},
                       {"beta1", set(t.beta1)},
                       {"beta2", set(t.beta2)},
                       {"eps", set(t.eps)},
                       {"weight_decay", set(t.weight_decay)},
                       {"seed", set(t.seed)},
                       {"kd_enabled", set(t.kd_enabled)},
                       {"init_scale", [&](const Json& x) {
                          if (x.is_null()) {
                            t.init_scale.reset();
                          } else {
                            double d = 0.0;
                            set(d)(x);
                            t.init_scale = d;
                          }
                        }}});
       }},
      {"sampler",
       [&](const Json& v) {
         apply_object(v, "sampler", {{"lambda", set(m.lambda)},
                                     {"rho1", set(m.rho1)},
                                     {"rho2", set(m.rho2)},
                                     {"max_len", set(m.max_len)},
                                     {"seed", set(m.seed)},
                                     {"mode",
                                      [&](const Json& x) {
                                        try {
                                          m.mode = parse_decode_mode(x.get<std::string>());
                                        } catch (const ContractError& e) {
                                          throw ConfigError(std::string("config: ") + e.what());
                                        }
                                      }},
                                     {"stop_at_eos", set(m.stop_at_eos)}});
       }},
      {"n_per_class", set(cfg.n_per_class)},
      {"paths",
       [&](const Json& v) {
         if (!v.is_object()) throw ConfigError("config: 'paths' must be an object");
         for (auto it = v.begin(); it != v.end(); ++it) cfg.paths[it.key()] = it.value().get<std::string>();
       }},
  };
  if (j.is_object() && !j.empty()) {
    bool bare_spec = true;
    for (auto it = j.begin(); it != j.end(); ++it) bare_spec = bare_spec && !top.count(it.key());
    if (bare_spec) {
      top.at("spec")(j);
      return cfg;
    }
  }
  apply_object(j, "config", top);
  return cfg;
}

RunConfig parse_run_config(const std::string& text) {
  Json j;
  try {
    j = Json::parse(text);
  } catch (const Json::parse_error& e) {
    throw ConfigError(std::string("config: invalid JSON: ") + e.what());
  }
  // A sidecar written by write_meta carries the effective config.
  if (j.is_object() && j.contains("command") && j.contains("config")) return apply_json(j["config"]);
  return apply_json(j);
}

RunConfig load_run_config(const std::string& path) {
  const auto bytes = read_file(path);
  return parse_run_config(std::string(bytes.begin(), bytes.end()));
}

std::string hash_hex(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::uint64_t file_hash(const std::string& path) { return content_hash(read_file(path)); }

std::string meta_path(const std::string& artifact) { return artifact + ".meta.json"; }

void write_meta(const std::string& artifact, const std::string& command, const RunConfig& cfg,
                const std::map<std::string, std::string>& inputs) {
  Json j;
  j["command"] = command;
  j["artifact_hash"] = hash_hex(file_hash(artifact));
  Json in = Json::object();
  for (const auto& [name, path] : inputs) in[name] = {{"path", path}, {"hash", hash_hex(file_hash(path))}};
  j["inputs"] = in;
  j["config"] = to_json(cfg);
  const std::string text = j.dump(2) + "\n";
  write_file(meta_path(artifact), {reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
}

}  // namespace ctrlgen
