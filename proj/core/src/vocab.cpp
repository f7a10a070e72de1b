#include "prefalign/vocab.hpp"

#include <algorithm>
#include <stdexcept>

namespace prefalign {

namespace {

const char* kSpecials[] = {"<pad>", "<bos>", "<eos>", "<img>"};

// Multi-character pieces. These only compress; the single-character tier below
// already spans the whole alphabet, so coverage never depends on this list.
const char* kWordPieces[] = {
    "Q: ",
    "\nA) ",
    "\nB) ",
    "\nC) ",
    "\nD) ",
    "\nCaption: ",
    "Answer: ",
    "Using the diagram, compute the ",
    "force on the object.",
    "final speed of the cart.",
    "voltage across the resistor.",
    "energy used by the lamp.",
    "distance covered by the runner.",
    "The diagram shows ",
    "mass ",
    "acceleration ",
    "speed ",
    "time ",
    "current ",
    "resistance ",
    "power ",
    "energy ",
    "distance ",
    " kg",
    " m/s^2",
    " m/s",
    " Ohm",
    " W",
    " J",
    " N",
    " V",
    " s",
    " and ",
    " = ",
};

}  // namespace

Vocab::Vocab() {
    for (const char* s : kSpecials) pieces_.emplace_back(s);
    const std::string punct = " \n:.,()*=-/^?";
    for (char c = 'a'; c <= 'z'; ++c) pieces_.emplace_back(1, c);
    for (char c = 'A'; c <= 'Z'; ++c) pieces_.emplace_back(1, c);
    for (char c = '0'; c <= '9'; ++c) pieces_.emplace_back(1, c);
    for (char c : punct) pieces_.emplace_back(1, c);
    for (const char* s : kWordPieces) pieces_.emplace_back(s);

    by_first_byte_.resize(256);
    for (int i = 0; i < static_cast<int>(pieces_.size()); ++i) {
        index_[pieces_[static_cast<std::size_t>(i)]] = i;
        if (i >= 4) {  // specials are never matched from raw text
            const auto first = static_cast<unsigned char>(pieces_[static_cast<std::size_t>(i)][0]);
            by_first_byte_[first].push_back(i);
        }
    }
    for (auto& bucket : by_first_byte_) {
        std::sort(bucket.begin(), bucket.end(), [this](int a, int b) {
            return pieces_[static_cast<std::size_t>(a)].size() >
                   pieces_[static_cast<std::size_t>(b)].size();
        });
    }
}

std::vector<int> Vocab::tokenize(const std::string& text) const {
    std::vector<int> out;
    std::size_t pos = 0;
    while (pos < text.size()) {
        const auto first = static_cast<unsigned char>(text[pos]);
        int matched = -1;
        for (int id : by_first_byte_[first]) {
            const std::string& piece = pieces_[static_cast<std::size_t>(id)];
            if (text.compare(pos, piece.size(), piece) == 0) {
                matched = id;
                break;  // buckets are longest-first
            }
        }
        if (matched < 0) {
            throw std::invalid_argument(std::string("tokenize: character '") + text[pos] +
                                        "' (byte " + std::to_string(first) +
                                        ") is not in the vocabulary");
        }
        out.push_back(matched);
        pos += pieces_[static_cast<std::size_t>(matched)].size();
    }
    return out;
}

std::string Vocab::detokenize(const std::vector<int>& ids) const {
    std::string out;
    for (int id : ids) {
        if (id < 0 || id >= size()) {
            throw std::invalid_argument("detokenize: id " + std::to_string(id) +
                                        " outside vocabulary of " + std::to_string(size()));
        }
        if (id < 4) continue;
        out += pieces_[static_cast<std::size_t>(id)];
    }
    return out;
}

const std::string& Vocab::piece(int id) const {
    if (id < 0 || id >= size()) {
        throw std::invalid_argument("piece: id " + std::to_string(id) + " out of range");
    }
    return pieces_[static_cast<std::size_t>(id)];
}

int Vocab::id_of(const std::string& piece) const {
    auto it = index_.find(piece);
    return it == index_.end() ? -1 : it->second;
}

}  // namespace prefalign
