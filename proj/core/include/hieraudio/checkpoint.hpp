#pragma once

#include <map>
#include <string>
#include <vector>

#include "hieraudio/conv_net.hpp"
#include "hieraudio/rvq.hpp"
#include "hieraudio/semantic.hpp"
#include "hieraudio/tensor.hpp"
#include "hieraudio/transformer.hpp"

namespace hieraudio {

// Binary tensor container, little-endian: magic "ALM1", u32 version=1,
// u32 tensor count; per tensor u16 name length, UTF-8 name, u8 ndims,
// u32 dims..., f32 data row-major. A JSON sidecar at <path>.json carries
// the architecture config and the producing config hash.
void save_tensors(const std::string& path,
                  const std::vector<std::pair<std::string, const nn::Tensor*>>& tensors);
std::map<std::string, nn::Tensor> load_tensors(const std::string& path);

void save_lm(const std::string& path, const nn::TransformerLM& model,
             const std::string& config_hash,
             const std::vector<std::pair<int, double>>& loss_curve = {});
nn::TransformerLM load_lm(const std::string& path, std::string* config_hash = nullptr);

void save_semantic_tokenizer(const std::string& path, const sem::SemanticTokenizer& tok,
                             const std::string& config_hash);
sem::SemanticTokenizer load_semantic_tokenizer(const std::string& path,
                                               std::string* config_hash = nullptr);

void save_rvq(const std::string& path, const rvq::RvqCodec& codec,
              const std::string& config_hash);
rvq::RvqCodec load_rvq(const std::string& path, std::string* config_hash = nullptr);

void save_conv(const std::string& path, const nn::ConvClassifier& model,
               const std::string& config_hash);
nn::ConvClassifier load_conv(const std::string& path, std::string* config_hash = nullptr);

}  // namespace hieraudio
