#pragma once

#include <string>
#include <unordered_map>
#include <vector>

namespace prefalign {

// Fixed task vocabulary: four specials, single characters covering the task
// alphabet, and multi-character pieces for recurring template fragments.
// Tokenization is greedy longest-match, so detokenize(tokenize(s)) == s for
// any string over the alphabet; characters outside it are rejected by name.
class Vocab {
public:
    static constexpr int kPad = 0;
    static constexpr int kBos = 1;
    static constexpr int kEos = 2;
    static constexpr int kImg = 3;

    Vocab();

    int size() const { return static_cast<int>(pieces_.size()); }
    std::vector<int> tokenize(const std::string& text) const;
    std::string detokenize(const std::vector<int>& ids) const;  // specials render as ""

    const std::string& piece(int id) const;
    int id_of(const std::string& piece) const;  // -1 when absent

private:
    std::vector<std::string> pieces_;
    std::unordered_map<std::string, int> index_;
    // Pieces grouped by first byte, longest first, for the greedy matcher.
    std::vector<std::vector<int>> by_first_byte_;
};

}  // namespace prefalign
