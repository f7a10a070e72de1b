#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "prefalign/model.hpp"

namespace prefalign {

// One synthetic physics MCQ. The answer is the product of two numeric
// parameters split across channels: the caption (the figure's text label)
// carries the first, the image grid carries the second, and the question
// names the quantity but never the values. Correctly placing the answer
// letter therefore requires reading both channels.
struct McqSample {
    std::string id;
    std::string question;
    std::array<std::string, 4> options;
    char answer = 'A';  // 'A'..'D'
    std::string explanation;
    ImageGrid image;    // 8x8, values in [0,1]
    std::string caption;
};

struct DatasetSplit {
    std::vector<McqSample> train;
    std::vector<McqSample> test;
    std::uint64_t seed = 0;
    double ratio = 0.0;
};

// Counts reported for the reference dataset; kept as preset constants, not
// derived from the split ratio (3700 + 676 != 4500 * anything clean).
inline constexpr int kPresetTotalSamples = 4500;
inline constexpr int kPresetTrainSamples = 3700;
inline constexpr int kPresetTestSamples = 676;

inline constexpr int kTemplateCount = 5;

// Grid layout: template id in rows 0-1 x cols 0-1 at intensity (tid+1)/10;
// the second parameter as a tally of 1.0 cells row-major from (6,0), values
// in 1..8. Everything else is 0 -- the first parameter is caption-only.
int decode_template(const ImageGrid& image);  // -> 0..kTemplateCount-1
int decode_param(const ImageGrid& image);     // -> p2, the tally count

std::vector<McqSample> generate_dataset(std::uint64_t seed, int n);

// Deterministic English rendering of the caption-borne first parameter.
std::string caption_of(int p1, int template_id);

DatasetSplit split_dataset(const std::vector<McqSample>& samples, double ratio, std::uint64_t seed);

void write_jsonl(const std::vector<McqSample>& samples, const std::string& path);
std::vector<McqSample> read_jsonl(const std::string& path);

}  // namespace prefalign
