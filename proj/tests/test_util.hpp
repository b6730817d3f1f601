#pragma once

#include <atomic>
#include <filesystem>
#include <string>
#include <unistd.h>

#include "poisonlab/model.hpp"

namespace poisonlab::test_support {

class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("poisonlab-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& rel) const { return path_ / rel; }

 private:
  std::filesystem::path path_;
};

// Hidden states that ignore the input entirely.
class ConstantBackend final : public ModelBackend {
 public:
  explicit ConstantBackend(Vocabulary vocab) : ModelBackend("constant", std::move(vocab)) {}
  BackendKind kind() const override { return BackendKind::mock_icl; }
  std::size_t layer_count() const override { return 2; }
  std::size_t hidden_dim() const override { return 3; }
  HiddenStack forward_hidden(std::span<const TokenId>) const override { return {{{1, 2, 3}, {0, -1, 4}}, 0}; }
  LogProbRow next_token_logprobs(std::span<const TokenId>) const override {
    std::vector<double> z(vocabulary().size(), 0.0);
    return log_softmax(z);
  }
};

}  // namespace poisonlab::test_support
