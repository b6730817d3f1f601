#pragma once

// Model manifests. A model lives in a directory holding manifest.json:
//
//   {"kind": "tiny-transformer" | "mock-icl" | "char-ngram",
//    "name": "...", "layers": L, "dim": d, "heads": h, "seed": s,
//    "vocab_path": "vocab.txt", "weights_path": "weights.bin",     (tiny-transformer)
//    "context": 1024,                                              (tiny-transformer)
//    "template": "F1",                                             (mock-icl)
//    "order": 2, "corpus_path": "corpus.txt"}                      (char-ngram)
//
// Relative paths resolve against the manifest's directory.

#include <filesystem>
#include <memory>
#include <string>

#include <json.hpp>

#include "poisonlab/char_ngram.hpp"
#include "poisonlab/common.hpp"
#include "poisonlab/mock_icl.hpp"
#include "poisonlab/model.hpp"
#include "poisonlab/tensor_container.hpp"
#include "poisonlab/tiny_transformer.hpp"

namespace poisonlab {

struct ModelManifest {
  BackendKind kind = BackendKind::tiny_transformer;
  std::string name;
  std::size_t layers = 1;
  std::size_t dim = 1;
  std::size_t heads = 1;
  std::size_t context = 1024;
  std::size_t order = 2;
  std::uint64_t seed = 0;
  std::string vocab_path = "vocab.txt";
  std::string weights_path;
  std::string corpus_path;
  std::string template_spec = "F1";

  nlohmann::json to_json() const {
    nlohmann::json j{{"kind", std::string(to_string(kind))}, {"name", name},          {"layers", layers},
                     {"dim", dim},                           {"heads", heads},        {"seed", seed},
                     {"vocab_path", vocab_path}};
    switch (kind) {
      case BackendKind::tiny_transformer:
        j["weights_path"] = weights_path;
        j["context"] = context;
        break;
      case BackendKind::mock_icl: j["template"] = template_spec; break;
      case BackendKind::char_ngram:
        j["order"] = order;
        j["corpus_path"] = corpus_path;
        break;
    }
    return j;
  }

  static ModelManifest from_json(const nlohmann::json& j) {
    try {
      ModelManifest m;
      m.kind = parse_backend_kind(j.at("kind").get<std::string>());
      m.name = j.value("name", std::string(to_string(m.kind)));
      m.layers = j.at("layers").get<std::size_t>();
      m.dim = j.at("dim").get<std::size_t>();
      m.heads = j.value("heads", std::size_t{1});
      m.seed = j.value("seed", std::uint64_t{0});
      m.vocab_path = j.at("vocab_path").get<std::string>();
      m.weights_path = j.value("weights_path", std::string());
      m.context = j.value("context", std::size_t{1024});
      m.order = j.value("order", std::size_t{2});
      m.corpus_path = j.value("corpus_path", std::string());
      m.template_spec = j.value("template", std::string("F1"));
      if (m.kind == BackendKind::tiny_transformer && m.weights_path.empty())
        throw data_error("tiny-transformer manifest needs weights_path");
      return m;
    } catch (const nlohmann::json::exception& e) {
      throw data_error(std::string("malformed model manifest: ") + e.what());
    }
  }
};

inline std::filesystem::path manifest_file(const std::filesystem::path& path) {
  return std::filesystem::is_directory(path) ? path / "manifest.json" : path;
}

inline std::unique_ptr<ModelBackend> load_model(const std::filesystem::path& path) {
  const auto file = manifest_file(path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(file));
  } catch (const nlohmann::json::exception& e) {
    throw data_error("malformed model manifest " + file.string() + ": " + e.what());
  }
  const ModelManifest m = ModelManifest::from_json(j);
  const auto dir = file.parent_path();
  Vocabulary vocab = Vocabulary::load(dir / m.vocab_path);
  switch (m.kind) {
    case BackendKind::tiny_transformer: {
      const auto weights = TensorContainer::load(dir / m.weights_path);
      TransformerShape shape{vocab.size(), m.dim, m.heads, m.layers, m.context};
      return std::make_unique<TinyTransformer>(m.name, std::move(vocab), shape, weights);
    }
    case BackendKind::mock_icl:
      return std::make_unique<MockIclModel>(m.name, std::move(vocab), m.layers, m.dim, m.seed,
                                            PromptTemplate::resolve(m.template_spec));
    case BackendKind::char_ngram: {
      if (m.layers != 1) throw data_error("char-ngram manifest must declare layers = 1");
      if (m.dim != vocab.size()) throw data_error("char-ngram manifest dim must equal the vocabulary size");
      std::vector<std::string> corpus;
      if (!m.corpus_path.empty()) corpus = split_lines(read_file(dir / m.corpus_path));
      return std::make_unique<CharNgramModel>(m.name, std::move(vocab), m.order, corpus);
    }
  }
  throw data_error("unknown backend kind");
}

/// Writes manifest.json (and weights.bin for tiny-transformer) into `dir`; the vocabulary
/// and corpus files named by the manifest are written by the caller.
inline void save_manifest(const std::filesystem::path& dir, const ModelManifest& m) {
  write_file(dir / "manifest.json", m.to_json().dump(2) + "\n");
}

inline void save_tiny_transformer(const std::filesystem::path& dir, const TinyTransformer& model,
                                  ModelManifest m) {
  m.kind = BackendKind::tiny_transformer;
  if (m.weights_path.empty()) m.weights_path = "weights.bin";
  model.vocabulary().save(dir / m.vocab_path);
  model.to_container().save(dir / m.weights_path);
  save_manifest(dir, m);
}

}  // namespace poisonlab
