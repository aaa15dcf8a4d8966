#include "hieraudio/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include <json.hpp>

#include "hieraudio/common.hpp"

namespace hieraudio {

namespace {

using json = nlohmann::ordered_json;

void put_u16(std::ofstream& f, uint16_t x) {
  unsigned char b[2] = {static_cast<unsigned char>(x & 0xff),
                        static_cast<unsigned char>(x >> 8)};
  f.write(reinterpret_cast<const char*>(b), 2);
}
void put_u32(std::ofstream& f, uint32_t x) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((x >> (8 * i)) & 0xff);
  f.write(reinterpret_cast<const char*>(b), 4);
}
uint16_t get_u16(std::ifstream& f) {
  unsigned char b[2];
  f.read(reinterpret_cast<char*>(b), 2);
  return static_cast<uint16_t>(b[0] | (b[1] << 8));
}
uint32_t get_u32(std::ifstream& f) {
  unsigned char b[4];
  f.read(reinterpret_cast<char*>(b), 4);
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

void write_sidecar(const std::string& path, const json& j) {
  std::ofstream f(path + ".json", std::ios::trunc);
  require(static_cast<bool>(f), "cannot write sidecar: " + path + ".json");
  f << j.dump(2) << "\n";
}

json read_sidecar(const std::string& path) {
  std::ifstream f(path + ".json");
  if (!f) fail_missing("checkpoint sidecar not found: " + path + ".json");
  json j;
  f >> j;
  return j;
}

}  // namespace

void save_tensors(const std::string& path,
                  const std::vector<std::pair<std::string, const nn::Tensor*>>& tensors) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(f), "cannot write checkpoint: " + path);
  f.write("ALM1", 4);
  put_u32(f, 1);  // version
  put_u32(f, static_cast<uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    require(name.size() <= 0xffff, "tensor name too long");
    put_u16(f, static_cast<uint16_t>(name.size()));
    f.write(name.data(), static_cast<std::streamsize>(name.size()));
    require(t->shape.size() <= 0xff, "too many dims");
    unsigned char nd = static_cast<unsigned char>(t->shape.size());
    f.write(reinterpret_cast<const char*>(&nd), 1);
    for (int d : t->shape) put_u32(f, static_cast<uint32_t>(d));
    std::vector<float> buf(t->data.begin(), t->data.end());
    f.write(reinterpret_cast<const char*>(buf.data()),
            static_cast<std::streamsize>(buf.size() * sizeof(float)));
  }
  require(static_cast<bool>(f), "short write to checkpoint: " + path);
}

std::map<std::string, nn::Tensor> load_tensors(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail_missing("checkpoint not found: " + path);
  char magic[4];
  f.read(magic, 4);
  require(f && std::memcmp(magic, "ALM1", 4) == 0, "bad checkpoint magic: " + path);
  uint32_t version = get_u32(f);
  require(version == 1, "unsupported checkpoint version " + std::to_string(version));
  uint32_t count = get_u32(f);
  std::map<std::string, nn::Tensor> out;
  for (uint32_t i = 0; i < count; ++i) {
    uint16_t name_len = get_u16(f);
    std::string name(name_len, '\0');
    f.read(name.data(), name_len);
    unsigned char nd = 0;
    f.read(reinterpret_cast<char*>(&nd), 1);
    std::vector<int> shape(nd);
    for (auto& d : shape) d = static_cast<int>(get_u32(f));
    nn::Tensor t(shape);
    std::vector<float> buf(static_cast<size_t>(t.size()));
    f.read(reinterpret_cast<char*>(buf.data()),
           static_cast<std::streamsize>(buf.size() * sizeof(float)));
    require(static_cast<bool>(f), "truncated checkpoint: " + path);
    for (size_t j = 0; j < buf.size(); ++j) t.data[j] = static_cast<double>(buf[j]);
    out[name] = std::move(t);
  }
  return out;
}

void save_lm(const std::string& path, const nn::TransformerLM& model,
             const std::string& config_hash,
             const std::vector<std::pair<int, double>>& loss_curve) {
  std::vector<std::pair<std::string, const nn::Tensor*>> tensors;
  for (const auto& p : model.params()) tensors.emplace_back(p.name, &p.t);
  save_tensors(path, tensors);
  const auto& c = model.config();
  json j;
  j["type"] = "transformer_lm";
  j["vocab_size"] = c.vocab_size;
  j["context_len"] = c.context_len;
  j["n_layers"] = c.n_layers;
  j["n_heads"] = c.n_heads;
  j["d_model"] = c.d_model;
  j["d_ff"] = c.d_ff;
  j["dropout"] = c.dropout;
  j["relpos_buckets"] = c.relpos_buckets;
  j["relpos_max_distance"] = c.relpos_max_distance;
  j["config_hash"] = config_hash;
  if (!loss_curve.empty()) {
    json curve = json::array();
    for (const auto& [s, l] : loss_curve) curve.push_back({s, l});
    j["loss_curve"] = curve;
  }
  write_sidecar(path, j);
}

nn::TransformerLM load_lm(const std::string& path, std::string* config_hash) {
  json j = read_sidecar(path);
  require(j.value("type", "") == std::string("transformer_lm"),
          "sidecar type mismatch for " + path);
  nn::LmConfig c;
  c.vocab_size = j.at("vocab_size").get<int>();
  c.context_len = j.at("context_len").get<int>();
  c.n_layers = j.at("n_layers").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.d_model = j.at("d_model").get<int>();
  c.d_ff = j.at("d_ff").get<int>();
  c.dropout = j.at("dropout").get<double>();
  c.relpos_buckets = j.at("relpos_buckets").get<int>();
  c.relpos_max_distance = j.at("relpos_max_distance").get<int>();
  if (config_hash != nullptr) *config_hash = j.value("config_hash", "");
  nn::TransformerLM model(c, 0);
  auto tensors = load_tensors(path);
  for (auto& p : model.params()) {
    auto it = tensors.find(p.name);
    if (it == tensors.end()) fail_input("checkpoint missing tensor " + p.name + ": " + path);
    require(it->second.shape == p.t.shape, "tensor shape mismatch for " + p.name);
    p.t = std::move(it->second);
  }
  return model;
}

void save_semantic_tokenizer(const std::string& path, const sem::SemanticTokenizer& tok,
                             const std::string& config_hash) {
  nn::Tensor mean({static_cast<int>(tok.mean.size())});
  mean.data = tok.mean;
  nn::Tensor stdv({static_cast<int>(tok.std.size())});
  stdv.data = tok.std;
  nn::Tensor codebook({tok.k, static_cast<int>(tok.mean.size())});
  codebook.data = tok.codebook;
  nn::Tensor recon;
  nn::Tensor seen;
  std::vector<std::pair<std::string, const nn::Tensor*>> tensors = {
      {"mean", &mean}, {"std", &stdv}, {"codebook", &codebook}};
  if (!tok.recon_table.empty()) {
    recon = nn::Tensor({tok.k, kSemanticHop});
    recon.data = tok.recon_table;
    seen = nn::Tensor({tok.k});
    for (int i = 0; i < tok.k; ++i) seen.data[static_cast<size_t>(i)] = tok.recon_seen[static_cast<size_t>(i)];
    tensors.emplace_back("recon_table", &recon);
    tensors.emplace_back("recon_seen", &seen);
  }
  save_tensors(path, tensors);
  json j;
  j["type"] = "semantic_tokenizer";
  j["k"] = tok.k;
  j["dim"] = static_cast<int>(tok.mean.size());
  j["degenerate_dims"] = tok.degenerate;
  j["config_hash"] = config_hash;
  write_sidecar(path, j);
}

sem::SemanticTokenizer load_semantic_tokenizer(const std::string& path,
                                               std::string* config_hash) {
  json j = read_sidecar(path);
  require(j.value("type", "") == std::string("semantic_tokenizer"),
          "sidecar type mismatch for " + path);
  sem::SemanticTokenizer tok;
  tok.k = j.at("k").get<int>();
  tok.degenerate = j.value("degenerate_dims", std::vector<int>{});
  if (config_hash != nullptr) *config_hash = j.value("config_hash", "");
  auto tensors = load_tensors(path);
  tok.mean = tensors.at("mean").data;
  tok.std = tensors.at("std").data;
  tok.codebook = tensors.at("codebook").data;
  if (tensors.count("recon_table") != 0) {
    tok.recon_table = tensors.at("recon_table").data;
    tok.recon_seen.resize(static_cast<size_t>(tok.k));
    const auto& seen = tensors.at("recon_seen").data;
    for (int i = 0; i < tok.k; ++i) {
      tok.recon_seen[static_cast<size_t>(i)] = seen[static_cast<size_t>(i)] != 0.0 ? 1 : 0;
    }
  }
  return tok;
}

void save_rvq(const std::string& path, const rvq::RvqCodec& codec,
              const std::string& config_hash) {
  nn::Tensor books({codec.q, codec.n, dsp::kFrameLen});
  books.data = codec.codebooks;
  save_tensors(path, {{"codebooks", &books}});
  json j;
  j["type"] = "rvq_codec";
  j["q"] = codec.q;
  j["n"] = codec.n;
  j["q_prime"] = codec.q_prime;
  j["frame_len"] = dsp::kFrameLen;
  j["config_hash"] = config_hash;
  write_sidecar(path, j);
}

rvq::RvqCodec load_rvq(const std::string& path, std::string* config_hash) {
  json j = read_sidecar(path);
  require(j.value("type", "") == std::string("rvq_codec"), "sidecar type mismatch for " + path);
  rvq::RvqCodec codec;
  codec.q = j.at("q").get<int>();
  codec.n = j.at("n").get<int>();
  codec.q_prime = j.at("q_prime").get<int>();
  if (config_hash != nullptr) *config_hash = j.value("config_hash", "");
  auto tensors = load_tensors(path);
  codec.codebooks = tensors.at("codebooks").data;
  require(static_cast<int64_t>(codec.codebooks.size()) ==
              static_cast<int64_t>(codec.q) * codec.n * dsp::kFrameLen,
          "rvq codebook size mismatch: " + path);
  return codec;
}

void save_conv(const std::string& path, const nn::ConvClassifier& model,
               const std::string& config_hash) {
  std::vector<std::pair<std::string, const nn::Tensor*>> tensors;
  for (const auto& p : model.params()) tensors.emplace_back(p.name, &p.t);
  nn::Tensor norm({2});
  norm.data = {model.input_mean, model.input_std};
  tensors.emplace_back("input_norm", &norm);
  save_tensors(path, tensors);
  const auto& c = model.config();
  json j;
  j["type"] = "conv_classifier";
  j["channels"] = c.channels;
  j["n_classes"] = c.n_classes;
  j["in_h"] = c.in_h;
  j["in_w"] = c.in_w;
  j["config_hash"] = config_hash;
  write_sidecar(path, j);
}

nn::ConvClassifier load_conv(const std::string& path, std::string* config_hash) {
  json j = read_sidecar(path);
  require(j.value("type", "") == std::string("conv_classifier"),
          "sidecar type mismatch for " + path);
  nn::ConvConfig c;
  c.channels = j.at("channels").get<std::vector<int>>();
  c.n_classes = j.at("n_classes").get<int>();
  c.in_h = j.at("in_h").get<int>();
  c.in_w = j.at("in_w").get<int>();
  if (config_hash != nullptr) *config_hash = j.value("config_hash", "");
  nn::ConvClassifier model(c, 0);
  auto tensors = load_tensors(path);
  for (auto& p : model.params()) {
    auto it = tensors.find(p.name);
    if (it == tensors.end()) fail_input("checkpoint missing tensor " + p.name + ": " + path);
    require(it->second.shape == p.t.shape, "tensor shape mismatch for " + p.name);
    p.t = std::move(it->second);
  }
  const auto& norm = tensors.at("input_norm").data;
  model.input_mean = norm[0];
  model.input_std = norm[1];
  return model;
}

}  // namespace hieraudio
