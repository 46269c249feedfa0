#pragma once

// JSON run configuration shared by the command-line tool. Every section is
// optional in a document; missing keys keep their defaults and unknown keys
// are rejected.
//
//   { "spec": {...}, "backbone": {...}, "train": {...}, "sampler": {...},
//     "n_per_class": N, "paths": {"name": "file", ...} }
//
// A document whose keys are all SynthSpec fields is read as the "spec"
// section alone, and a .meta.json sidecar by its "config" member.

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>

#include "json.hpp"

#include "ctrlgen/backbone.hpp"
#include "ctrlgen/corpus.hpp"
#include "ctrlgen/sampling.hpp"
#include "ctrlgen/training.hpp"

namespace ctrlgen {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RunConfig {
  SynthSpec spec;
  BackboneTrainConfig backbone;
  TrainConfig train;
  SamplerConfig sampler;
  std::size_t n_per_class = 1000;  // corpus size for gen-corpus
  std::map<std::string, std::string> paths;
};

using Json = nlohmann::ordered_json;

Json to_json(const SynthSpec& s);
Json to_json(const BackboneTrainConfig& c);
Json to_json(const TrainConfig& c);
Json to_json(const SamplerConfig& c);
Json to_json(const RunConfig& c);

/// Overlays the keys present in `j` onto `base`. Throws ConfigError on an
/// unknown key or a value of the wrong type.
RunConfig apply_json(const Json& j, RunConfig base = {});

RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::string& path);

/// Hex string of a 64-bit content hash, as written into sidecars.
std::string hash_hex(std::uint64_t h);
std::uint64_t file_hash(const std::string& path);

/// `<artifact>.meta.json`: the effective config, the content hashes of the
/// named inputs and of the artifact itself.
std::string meta_path(const std::string& artifact);
void write_meta(const std::string& artifact, const std::string& command, const RunConfig& cfg,
                const std::map<std::string, std::string>& inputs);

}  // namespace ctrlgen
