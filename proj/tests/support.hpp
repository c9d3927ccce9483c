#pragma once

#include <atomic>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <unistd.h>

#include "sibyl/corpus.hpp"
#include "sibyl/util.hpp"

namespace sibyl::testing {

inline std::filesystem::path data_dir() { return SIBYL_TEST_DATA_DIR; }
inline std::filesystem::path fixture(const std::string& name) { return data_dir() / "fixtures" / name; }
inline std::filesystem::path golden(const std::string& name) { return data_dir() / "golden" / name; }

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("sibyl-test-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
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
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

/// Alternating seeker/supporter dialogue starting with the seeker.
inline Dialogue make_dialogue(const std::string& id, const std::vector<std::string>& texts,
                              Split split = Split::Train, Dataset dataset = Dataset::ED) {
  Dialogue d;
  d.id = id;
  d.dataset = dataset;
  d.split = split;
  for (std::size_t i = 0; i < texts.size(); ++i) {
    d.utterances.push_back({i, i % 2 == 0 ? Role::Seeker : Role::Supporter, texts[i]});
  }
  return d;
}

/// The four-turn dialogue the golden prompt files were written against.
inline Dialogue golden_dialogue() {
  return make_dialogue("golden-1", {"I finally adopted a puppy from the shelter last weekend.",
                                    "That is wonderful! What kind of dog is it?",
                                    "A little terrier mix. He chewed up my favorite shoes already though.",
                                    "Ha, puppies will be puppies. Maybe get him some chew toys?"});
}

inline const char* kWords[] = {"calm",  "rain",   "dog",   "job",  "happy", "sad",   "friend", "call",
                               "walk",  "home",   "worry", "cake", "late",  "train", "music",  "sleep",
                               "tired", "gift",   "party", "exam", "lost",  "found", "proud",  "sorry"};

/// Random sentence of `lo`..`hi` words drawn from a small vocabulary.
inline std::string random_sentence(std::mt19937_64& rng, std::size_t lo = 3, std::size_t hi = 12) {
  const auto len = lo + uniform_below(rng, hi - lo + 1);
  std::string s;
  for (std::size_t i = 0; i < len; ++i) {
    if (i) s += ' ';
    s += kWords[uniform_below(rng, std::size(kWords))];
  }
  return s + ".";
}

/// Random well-formed dialogue of 2..max_turns alternating turns.
inline Dialogue random_dialogue(std::mt19937_64& rng, const std::string& id, Split split = Split::Train,
                                std::size_t max_turns = 8) {
  const auto turns = 2 + uniform_below(rng, max_turns - 1);
  std::vector<std::string> texts;
  for (std::size_t i = 0; i < turns; ++i) texts.push_back(random_sentence(rng) + " #" + id + "-" + std::to_string(i));
  return make_dialogue(id, texts, split);
}

}  // namespace sibyl::testing
