#include "nahtm/checkpoint.h"

#include <bit>
#include <fstream>
#include <set>

#include "nahtm/error.h"

namespace nahtm {

namespace {

constexpr char kMagic[8] = {'N', 'A', 'H', 'T', 'M', 'C', 'K', 'P'};

void put_u64(std::ostream& out, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 8);
}

std::uint64_t get_u64(std::istream& in, const std::string& what) {
  unsigned char b[8];
  if (!in.read(reinterpret_cast<char*>(b), 8)) throw ParseError("checkpoint: truncated " + what);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

}  // namespace

nlohmann::json hyper_to_json(const model::HyperParams& hp) {
  return {
      {"gamma1", hp.gamma1},
      {"gamma2", hp.gamma2},
      {"gamma3", hp.gamma3},
      {"gamma4", hp.gamma4},
      {"beta0", hp.beta0},
      {"beta1", hp.beta1},
      {"beta2", hp.beta2},
      {"lambda0", hp.lambda0},
      {"lambda1", hp.lambda1},
      {"topics", hp.topics},
      {"hidden", hp.hidden},
      {"hidden_layers", hp.hidden_layers},
      {"variant", std::string(model::to_string(hp.variant))},
      {"attention_normalizer", std::string(model::to_string(hp.attention_normalizer))},
      {"hard_weights", hp.hard_weights},
      {"doc_embedding", std::string(model::to_string(hp.doc_embedding))},
      {"activation", std::string(model::to_string(hp.activation))},
      {"detach_doc_posterior", hp.detach_doc_posterior},
      {"detach_attention_target", hp.detach_attention_target},
      {"decoder_bias", hp.decoder_bias},
  };
}

model::HyperParams hyper_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ParseError("hyperparameters must be a JSON object");
  model::HyperParams hp;
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "gamma1") hp.gamma1 = v.get<double>();
      else if (key == "gamma2") hp.gamma2 = v.get<double>();
      else if (key == "gamma3") hp.gamma3 = v.get<double>();
      else if (key == "gamma4") hp.gamma4 = v.get<double>();
      else if (key == "beta0") hp.beta0 = v.get<double>();
      else if (key == "beta1") hp.beta1 = v.get<double>();
      else if (key == "beta2") hp.beta2 = v.get<double>();
      else if (key == "lambda0") hp.lambda0 = v.get<double>();
      else if (key == "lambda1") hp.lambda1 = v.get<double>();
      else if (key == "topics") hp.topics = v.get<std::size_t>();
      else if (key == "hidden") hp.hidden = v.get<std::size_t>();
      else if (key == "hidden_layers") hp.hidden_layers = v.get<std::size_t>();
      else if (key == "variant") hp.variant = model::parse_variant(v.get<std::string>());
      else if (key == "attention_normalizer") hp.attention_normalizer = model::parse_normalizer(v.get<std::string>());
      else if (key == "hard_weights") hp.hard_weights = v.get<bool>();
      else if (key == "doc_embedding") hp.doc_embedding = model::parse_doc_embedding_source(v.get<std::string>());
      else if (key == "activation") hp.activation = model::parse_activation(v.get<std::string>());
      else if (key == "detach_doc_posterior") hp.detach_doc_posterior = v.get<bool>();
      else if (key == "detach_attention_target") hp.detach_attention_target = v.get<bool>();
      else if (key == "decoder_bias") hp.decoder_bias = v.get<bool>();
      else throw ConfigError("unknown hyperparameter '" + key + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("hyperparameters: ") + e.what());
  }
  hp.validate();
  return hp;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const model::ModelParams& p = ckpt.params;
  const std::vector<model::NamedTensor> tensors = p.all();
  nlohmann::json header;
  header["format"] = "nahtm-checkpoint";
  header["format_version"] = kCheckpointFormatVersion;
  header["K"] = p.topics();
  header["L"] = ckpt.hyper.hidden;
  header["hidden_layers"] = ckpt.hyper.hidden_layers;
  header["V"] = p.vocab_size();
  header["M"] = p.embed_dim();
  header["S"] = p.num_sentences();
  header["variant"] = std::string(model::to_string(ckpt.hyper.variant));
  header["hyper"] = hyper_to_json(ckpt.hyper);
  header["step"] = ckpt.step;
  header["epoch"] = ckpt.epoch;
  header["metadata"] = ckpt.metadata;
  nlohmann::json list = nlohmann::json::array();
  for (const auto& nt : tensors) {
    list.push_back({{"name", nt.name}, {"shape", {nt.tensor.rows(), nt.tensor.cols()}}});
  }
  header["tensors"] = list;
  const std::string text = header.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write checkpoint " + tmp.string());
    out.write(kMagic, sizeof kMagic);
    put_u64(out, text.size());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& nt : tensors) {
      for (double v : nt.tensor.data()) put_u64(out, std::bit_cast<std::uint64_t>(v));
    }
    if (!out) throw DataError("failed writing checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  char magic[8];
  if (!in.read(magic, 8) || !std::equal(magic, magic + 8, kMagic)) {
    throw ParseError(path.string() + ": not a checkpoint file");
  }
  const std::uint64_t len = get_u64(in, "header length");
  if (len > (std::uint64_t{1} << 30)) throw ParseError(path.string() + ": implausible header length");
  std::string text(len, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(len))) throw ParseError(path.string() + ": truncated header");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }

  Checkpoint ckpt;
  model::ModelDims dims;
  try {
    if (header.at("format") != "nahtm-checkpoint") throw ParseError(path.string() + ": wrong format tag");
    if (header.at("format_version").get<int>() != kCheckpointFormatVersion) {
      throw DataError(path.string() + ": unsupported checkpoint version");
    }
    ckpt.hyper = hyper_from_json(header.at("hyper"));
    ckpt.step = header.at("step").get<std::uint64_t>();
    ckpt.epoch = header.at("epoch").get<std::size_t>();
    ckpt.metadata = header.at("metadata").get<std::map<std::string, std::string>>();
    dims.vocab = header.at("V").get<std::size_t>();
    dims.embed_dim = header.at("M").get<std::size_t>();
    dims.num_sentences = header.at("S").get<std::size_t>();
    if (header.at("K").get<std::size_t>() != ckpt.hyper.topics) throw DataError(path.string() + ": K disagrees");
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }

  std::optional<std::vector<double>> bias;
  if (ckpt.hyper.decoder_bias) bias = std::vector<double>(dims.vocab, 0.0);
  ckpt.params = model::ModelParams::init(dims, ckpt.hyper, 0, bias);
  const std::vector<model::NamedTensor> tensors = ckpt.params.all();

  const auto& list = header.at("tensors");
  if (list.size() != tensors.size()) throw DataError(path.string() + ": tensor count mismatch");
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    const auto& nt = tensors[i];
    const std::string name = list[i].at("name").get<std::string>();
    const auto shape = list[i].at("shape").get<std::vector<std::size_t>>();
    if (name != nt.name || shape.size() != 2 || shape[0] != nt.tensor.rows() || shape[1] != nt.tensor.cols()) {
      throw DataError(path.string() + ": unexpected tensor '" + name + "' at position " + std::to_string(i));
    }
    for (double& v : nt.tensor.data_mut()) v = std::bit_cast<double>(get_u64(in, "tensor " + name));
  }
  if (in.peek() != std::char_traits<char>::eof()) throw ParseError(path.string() + ": trailing bytes");
  return ckpt;
}

}  // namespace nahtm
