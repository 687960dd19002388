#include "convmatch/checkpoint.hpp"

#include <bit>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <sstream>

#include <json.hpp>

#include "convmatch/errors.hpp"

namespace convmatch {

namespace {

constexpr std::string_view kMagic = "CONVMATCH-CHECKPOINT ";

using nlohmann::json;

json config_json(const ModelConfig& c) {
  return json{{"topics", c.topics}, {"roles", c.roles},   {"vocab_size", c.vocab_size},
              {"hidden", c.hidden}, {"gamma", c.gamma},   {"margin", c.margin},
              {"tau", c.tau}};
}

ModelConfig config_from(const json& j) {
  ModelConfig c;
  c.topics = j.at("topics").get<std::size_t>();
  c.roles = j.at("roles").get<std::size_t>();
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.hidden = j.at("hidden").get<std::size_t>();
  c.gamma = j.at("gamma").get<double>();
  c.margin = j.at("margin").get<double>();
  c.tau = j.at("tau").get<double>();
  return c;
}

void put_f64(std::string& out, double x) {
  auto bits = std::bit_cast<std::uint64_t>(x);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

double get_f64(const char* p) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= std::uint64_t(static_cast<unsigned char>(p[i])) << (8 * i);
  return std::bit_cast<double>(bits);
}

[[noreturn]] void corrupt(const std::string& why) { throw DataError("corrupt checkpoint: " + why); }

void check_expected(const ModelConfig& got, const ModelConfig& want) {
  auto field = [](const char* name, std::size_t have, std::size_t asked) {
    if (asked != 0 && have != asked) {
      throw DataError(std::string("shape mismatch: checkpoint has ") + name + "=" +
                      std::to_string(have) + " but " + name + "=" + std::to_string(asked) +
                      " was requested");
    }
  };
  field("K", got.topics, want.topics);
  field("D", got.roles, want.roles);
  field("V", got.vocab_size, want.vocab_size);
  field("hidden", got.hidden, want.hidden);
}

}  // namespace

std::string serialize_checkpoint(const Checkpoint& ckpt) {
  json tensors = json::array();
  std::size_t offset = 0;
  for (const auto& p : ckpt.params) {
    tensors.push_back(json{{"name", p.name},
                           {"rows", p.value.rows()},
                           {"cols", p.value.cols()},
                           {"offset", offset}});
    offset += p.value.values().size() * sizeof(double);
  }
  char fp[17];
  std::snprintf(fp, sizeof fp, "%016llx", static_cast<unsigned long long>(ckpt.vocab.fingerprint()));
  json header{
      {"config", config_json(ckpt.config)},
      {"mode", std::string(to_string(ckpt.mode))},
      {"vocabulary",
       json{{"min_count", ckpt.vocab.min_count()}, {"fingerprint", fp}, {"tokens", ckpt.vocab.tokens()}}},
      {"tensors", tensors},
      {"payload_bytes", offset},
      {"train", json{{"seed", ckpt.summary.seed},
                     {"epochs_run", ckpt.summary.epochs_run},
                     {"best_epoch", ckpt.summary.best_epoch},
                     {"best_valid_mrr", ckpt.summary.best_valid_mrr},
                     {"final_lr", ckpt.summary.final_lr}}},
  };
  std::string out(kMagic);
  out += std::to_string(kCheckpointVersion);
  out += '\n';
  out += header.dump();
  out += '\n';
  out.reserve(out.size() + offset);
  for (const auto& p : ckpt.params) {
    for (double x : p.value.values()) put_f64(out, x);
  }
  return out;
}

Checkpoint parse_checkpoint(std::string_view bytes, const ModelConfig* expected) {
  const auto eol1 = bytes.find('\n');
  if (eol1 == std::string_view::npos || bytes.substr(0, kMagic.size()) != kMagic) {
    corrupt("missing header");
  }
  const std::string version(bytes.substr(kMagic.size(), eol1 - kMagic.size()));
  if (version != std::to_string(kCheckpointVersion)) {
    throw DataError("unsupported checkpoint version '" + version + "' (this build reads version " +
                    std::to_string(kCheckpointVersion) + ")");
  }
  const auto eol2 = bytes.find('\n', eol1 + 1);
  if (eol2 == std::string_view::npos) corrupt("truncated header");
  const std::string_view payload = bytes.substr(eol2 + 1);

  Checkpoint ckpt;
  std::vector<Model::Shape> manifest;
  std::size_t payload_bytes = 0;
  try {
    const json h = json::parse(bytes.substr(eol1 + 1, eol2 - eol1 - 1));
    ckpt.config = config_from(h.at("config"));
    ckpt.mode = parse_mode(h.at("mode").get<std::string>());
    const auto& v = h.at("vocabulary");
    ckpt.vocab = Vocabulary::from_tokens(v.at("tokens").get<std::vector<std::string>>(),
                                         v.at("min_count").get<std::size_t>());
    for (const auto& t : h.at("tensors")) {
      manifest.push_back({t.at("name").get<std::string>(), t.at("rows").get<std::size_t>(),
                          t.at("cols").get<std::size_t>()});
    }
    payload_bytes = h.at("payload_bytes").get<std::size_t>();
    const auto& s = h.at("train");
    ckpt.summary.seed = s.at("seed").get<std::uint64_t>();
    ckpt.summary.epochs_run = s.at("epochs_run").get<std::size_t>();
    ckpt.summary.best_epoch = s.at("best_epoch").get<std::size_t>();
    ckpt.summary.best_valid_mrr = s.at("best_valid_mrr").get<double>();
    ckpt.summary.final_lr = s.at("final_lr").get<double>();
  } catch (const json::exception& e) {
    corrupt(std::string("bad header (") + e.what() + ")");
  } catch (const UsageError& e) {
    corrupt(std::string("bad header (") + e.what() + ")");
  }

  std::size_t declared = 0;
  for (const auto& s : manifest) declared += s.rows * s.cols * sizeof(double);
  if (declared != payload_bytes) corrupt("manifest does not add up to payload size");
  if (payload.size() != payload_bytes) {
    corrupt("payload is " + std::to_string(payload.size()) + " bytes, header declares " +
            std::to_string(payload_bytes));
  }
  if (ckpt.vocab.size() != ckpt.config.vocab_size) corrupt("vocabulary size disagrees with config");
  if (expected) check_expected(ckpt.config, *expected);

  const auto want = Model::expected_shapes(ckpt.config);
  if (want.size() != manifest.size()) {
    throw DataError("shape mismatch: checkpoint holds " + std::to_string(manifest.size()) +
                    " tensors, config expects " + std::to_string(want.size()));
  }
  std::size_t at = 0;
  for (std::size_t i = 0; i < manifest.size(); ++i) {
    const auto& s = manifest[i];
    if (s.name != want[i].name || s.rows != want[i].rows || s.cols != want[i].cols) {
      throw DataError("shape mismatch: tensor '" + s.name + "' is " + std::to_string(s.rows) + "x" +
                      std::to_string(s.cols) + ", expected '" + want[i].name + "' " +
                      std::to_string(want[i].rows) + "x" + std::to_string(want[i].cols));
    }
    std::vector<double> values(s.rows * s.cols);
    for (double& x : values) {
      x = get_f64(payload.data() + at);
      at += sizeof(double);
    }
    ckpt.params.add(s.name, Matrix(s.rows, s.cols, std::move(values)));
  }
  // Constructing the model re-validates the manifest against the config.
  (void)ckpt.model();
  return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  const std::string bytes = serialize_checkpoint(ckpt);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write checkpoint '" + path + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("failed writing checkpoint '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path, const ModelConfig* expected) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint '" + path + "'");
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return parse_checkpoint(bytes, expected);
  } catch (const DataError& e) {
    throw DataError(path + ": " + e.what());
  }
}

}  // namespace convmatch
