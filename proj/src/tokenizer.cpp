#include "eelo/tokenizer.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <set>

#include <json.hpp>

#include "eelo/errors.hpp"

namespace eelo {

using nlohmann::ordered_json;

namespace {

const std::vector<std::string> kSpecials = {"<bos>", "<eos>", "<unk>", "wait"};

std::string lower_ascii(std::string s) {
    for (char& c : s) {
        c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    }
    return s;
}

} // namespace

Tokenizer::Tokenizer(std::vector<std::string> tokens, bool lowercase)
    : tokens_(std::move(tokens)), lowercase_(lowercase) {
    if (tokens_.size() < kSpecials.size()) {
        throw InputError("tokenizer vocabulary smaller than the reserved token block");
    }
    for (size_t i = 0; i < kSpecials.size(); ++i) {
        if (tokens_[i] != kSpecials[i]) {
            throw InputError("tokenizer vocabulary must start with <bos>, <eos>, <unk>, wait");
        }
    }
    for (size_t i = 0; i < tokens_.size(); ++i) {
        if (!index_.emplace(tokens_[i], static_cast<int>(i)).second) {
            throw InputError("duplicate vocabulary entry '" + tokens_[i] + "'");
        }
    }
}

std::vector<std::string> Tokenizer::split_words(const std::string& text) {
    std::vector<std::string> words;
    size_t i = 0;
    while (i < text.size()) {
        while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) {
            ++i;
        }
        size_t start = i;
        while (i < text.size() && !std::isspace(static_cast<unsigned char>(text[i]))) {
            ++i;
        }
        if (i > start) {
            words.push_back(text.substr(start, i - start));
        }
    }
    return words;
}

Tokenizer Tokenizer::from_corpus(const std::vector<std::string>& texts, bool lowercase) {
    std::set<std::string> words;
    for (const auto& text : texts) {
        for (auto& w : split_words(lowercase ? lower_ascii(text) : text)) {
            words.insert(std::move(w));
        }
    }
    std::vector<std::string> vocab = kSpecials;
    for (const auto& w : words) {
        if (std::find(kSpecials.begin(), kSpecials.end(), w) == kSpecials.end()) {
            vocab.push_back(w);
        }
    }
    return Tokenizer(std::move(vocab), lowercase);
}

std::vector<int> Tokenizer::encode(const std::string& text) const {
    std::vector<int> ids;
    for (const auto& w : split_words(lowercase_ ? lower_ascii(text) : text)) {
        ids.push_back(id(w));
    }
    return ids;
}

std::string Tokenizer::decode(const std::vector<int>& ids) const {
    std::string out;
    for (int i : ids) {
        if (i == bos_id || i == eos_id) {
            continue;
        }
        if (!out.empty()) {
            out += ' ';
        }
        out += token(i);
    }
    return out;
}

int Tokenizer::id(const std::string& tok) const {
    auto it = index_.find(tok);
    return it == index_.end() ? unk_id : it->second;
}

const std::string& Tokenizer::token(int id) const {
    if (id < 0 || id >= size()) {
        throw InputError("token id " + std::to_string(id) + " out of range");
    }
    return tokens_[static_cast<size_t>(id)];
}

void Tokenizer::save(const std::filesystem::path& path) const {
    ordered_json j;
    j["lowercase"] = lowercase_;
    j["tokens"] = tokens_;
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw RuntimeFailure("cannot write tokenizer '" + path.string() + "'");
    }
    out << j.dump(2) << "\n";
}

Tokenizer Tokenizer::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw InputError("cannot open tokenizer '" + path.string() + "'");
    }
    ordered_json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw InputError("tokenizer parse error: " + std::string(e.what()));
    }
    try {
        return Tokenizer(j.at("tokens").get<std::vector<std::string>>(),
                         j.at("lowercase").get<bool>());
    } catch (const nlohmann::json::exception& e) {
        throw InputError("tokenizer: " + std::string(e.what()));
    }
}

} // namespace eelo
