#pragma once

#include <filesystem>
#include <string>
#include <unordered_map>
#include <vector>

namespace eelo {

// Whitespace tokenizer over a closed vocabulary. Ids 0..3 are reserved:
// <bos>, <eos>, <unk>, and the literal trigger word "wait".
class Tokenizer {
public:
    static constexpr int bos_id = 0;
    static constexpr int eos_id = 1;
    static constexpr int unk_id = 2;
    static constexpr int wait_id = 3;

    Tokenizer(std::vector<std::string> tokens, bool lowercase);

    // Closed vocab from the corpus: specials first, then every distinct
    // whitespace-separated word in sorted order.
    static Tokenizer from_corpus(const std::vector<std::string>& texts, bool lowercase = true);

    std::vector<int> encode(const std::string& text) const;
    // Space-joined tokens; <bos>/<eos> are dropped, unknown ids rejected.
    std::string decode(const std::vector<int>& ids) const;

    int id(const std::string& token) const; // unk_id when out of vocabulary
    const std::string& token(int id) const;
    int size() const { return static_cast<int>(tokens_.size()); }
    bool lowercase() const { return lowercase_; }

    void save(const std::filesystem::path& path) const;
    static Tokenizer load(const std::filesystem::path& path);

    static std::vector<std::string> split_words(const std::string& text);

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, int> index_;
    bool lowercase_;
};

} // namespace eelo
