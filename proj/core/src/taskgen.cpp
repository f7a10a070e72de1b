#include "prefalign/taskgen.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "prefalign/rng.hpp"

namespace prefalign {

namespace {

struct Template {
    const char* question;
    const char* symbol;     // left-hand side of the formula
    const char* factors;    // "m*a" etc.
    const char* p1_name;    // caption wording
    const char* p1_unit;
};

const Template kTemplates[kTemplateCount] = {
    {"Using the diagram, compute the force on the object.", "F", "m*a", "mass", " kg"},
    {"Using the diagram, compute the final speed of the cart.", "v", "a*t",
     "acceleration", " m/s^2"},
    {"Using the diagram, compute the voltage across the resistor.", "V", "I*R", "current", " A"},
    {"Using the diagram, compute the energy used by the lamp.", "E", "P*t", "power", " W"},
    {"Using the diagram, compute the distance covered by the runner.", "d", "s*t",
     "speed", " m/s"},
};

void write_block(ImageGrid& g, int r0, int c0, double intensity) {
    for (int r = r0; r < r0 + 2; ++r) {
        for (int c = c0; c < c0 + 2; ++c) {
            g[static_cast<std::size_t>(r * 8 + c)] = intensity;
        }
    }
}

int read_block(const ImageGrid& g, int r0, int c0) {
    double acc = 0.0;
    for (int r = r0; r < r0 + 2; ++r) {
        for (int c = c0; c < c0 + 2; ++c) {
            acc += g[static_cast<std::size_t>(r * 8 + c)];
        }
    }
    return static_cast<int>(std::lround(acc / 4.0 * 10.0));
}

// The image-borne parameter is drawn as a tally: `count` cells lit at 1.0
// row-major from (r0, 0).
void write_count(ImageGrid& g, int r0, int count) {
    for (int i = 0; i < count; ++i) {
        g[static_cast<std::size_t>((r0 + i / 8) * 8 + i % 8)] = 1.0;
    }
}

int read_count(const ImageGrid& g, int r0) {
    double acc = 0.0;
    for (int i = 0; i < 16; ++i) {
        acc += g[static_cast<std::size_t>((r0 + i / 8) * 8 + i % 8)];
    }
    return static_cast<int>(std::lround(acc));
}

void check_grid(const ImageGrid& image, const char* who) {
    if (image.size() != kImageCells) {
        throw std::invalid_argument(std::string(who) + ": expected 8x8 grid, got " +
                                    std::to_string(image.size()) + " cells");
    }
}

}  // namespace

int decode_template(const ImageGrid& image) {
    check_grid(image, "decode_template");
    return read_block(image, 0, 0) - 1;
}

int decode_param(const ImageGrid& image) {
    check_grid(image, "decode_param");
    return read_count(image, 6);
}

// The caption verbalizes the first parameter only; the second is carried by
// the image alone, so neither channel replaces the other.
std::string caption_of(int p1, int template_id) {
    if (template_id < 0 || template_id >= kTemplateCount) {
        throw std::invalid_argument("caption_of: unknown template " + std::to_string(template_id));
    }
    const Template& t = kTemplates[template_id];
    return std::string("The diagram shows ") + t.p1_name + " " + std::to_string(p1) + t.p1_unit +
           ".";
}

std::vector<McqSample> generate_dataset(std::uint64_t seed, int n) {
    if (n < 1) throw std::invalid_argument("generate_dataset: n must be >= 1");
    Rng root(seed);
    std::vector<McqSample> out;
    out.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        Rng rng = root.split(static_cast<std::uint64_t>(i));
        const int tid = static_cast<int>(rng.below(kTemplateCount));
        const int p1 = 1 + static_cast<int>(rng.below(9));
        const int p2 = 1 + static_cast<int>(rng.below(8));
        const Template& t = kTemplates[tid];
        const int correct = p1 * p2;

        McqSample s;
        char idbuf[16];
        std::snprintf(idbuf, sizeof idbuf, "q%05d", i);
        s.id = idbuf;
        s.question = t.question;

        s.image.assign(kImageCells, 0.0);
        write_block(s.image, 0, 0, (tid + 1) / 10.0);
        write_count(s.image, 6, p2);
        s.caption = caption_of(p1, tid);

        // Both parameters jointly pick the gold slot. Every distractor is a
        // random product a*b whose factor pair lands on its own slot under
        // the same rule, so each option looks equally plausible from either
        // single channel: the values neither echo p1 (no shared factor for
        // the image-only model to latch onto) nor give the caption-only
        // model a slot to prune.
        const int answer_slot = (p1 + p2) % 4;
        auto option_taken = [&](int value) {
            if (value == correct) return true;
            for (const auto& opt : s.options) {
                if (opt == std::to_string(value)) return true;
            }
            return false;
        };
        for (int slot = 0; slot < 4; ++slot) {
            int value = correct;
            if (slot != answer_slot) {
                value = 0;
                for (int attempts = 0; value == 0 && attempts < 64; ++attempts) {
                    const int a = 1 + static_cast<int>(rng.below(9));
                    const int b = 1 + static_cast<int>(rng.below(8));
                    if ((a + b) % 4 == slot && !option_taken(a * b)) value = a * b;
                }
                for (int a = 1; value == 0 && a <= 9; ++a) {  // deterministic escape hatch
                    for (int b = 1; value == 0 && b <= 8; ++b) {
                        if ((a + b) % 4 == slot && !option_taken(a * b)) value = a * b;
                    }
                }
            }
            s.options[static_cast<std::size_t>(slot)] = std::to_string(value);
        }
        s.answer = static_cast<char>('A' + answer_slot);
        s.explanation = std::string(t.symbol) + " = " + t.factors + " = " + std::to_string(p1) +
                        "*" + std::to_string(p2) + " = " + std::to_string(correct) + ".";
        out.push_back(std::move(s));
    }
    return out;
}

DatasetSplit split_dataset(const std::vector<McqSample>& samples, double ratio, std::uint64_t seed) {
    if (samples.empty()) throw std::invalid_argument("split_dataset: empty input");
    if (!(ratio > 0.0 && ratio < 1.0)) {
        throw std::invalid_argument("split_dataset: ratio must lie in (0,1)");
    }
    const std::size_t n = samples.size();
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Rng rng(seed);
    for (std::size_t i = 0; i + 1 < n; ++i) {
        const std::size_t j = i + static_cast<std::size_t>(rng.below(n - i));
        std::swap(order[i], order[j]);
    }
    const auto train_n = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(n)));
    DatasetSplit out;
    out.seed = seed;
    out.ratio = ratio;
    for (std::size_t i = 0; i < n; ++i) {
        (i < train_n ? out.train : out.test).push_back(samples[order[i]]);
    }
    return out;
}

namespace {

using ordered_json = nlohmann::ordered_json;

ordered_json sample_to_json(const McqSample& s) {
    ordered_json row;
    row["id"] = s.id;
    row["question"] = s.question;
    row["options"] = s.options;
    row["answer"] = std::string(1, s.answer);
    row["explanation"] = s.explanation;
    ordered_json grid = ordered_json::array();
    for (int r = 0; r < 8; ++r) {
        ordered_json line = ordered_json::array();
        for (int c = 0; c < 8; ++c) line.push_back(s.image[static_cast<std::size_t>(r * 8 + c)]);
        grid.push_back(std::move(line));
    }
    row["image"] = std::move(grid);
    row["caption"] = s.caption;
    return row;
}

[[noreturn]] void line_error(const std::string& path, std::size_t lineno, const std::string& what) {
    throw std::runtime_error(path + ":" + std::to_string(lineno) + ": " + what);
}

McqSample sample_from_json(const ordered_json& row, const std::string& path, std::size_t lineno) {
    for (const char* field : {"id", "question", "options", "answer", "explanation", "image", "caption"}) {
        if (!row.contains(field)) line_error(path, lineno, std::string("missing field '") + field + "'");
    }
    McqSample s;
    try {
        s.id = row["id"].get<std::string>();
        s.question = row["question"].get<std::string>();
        const auto& opts = row["options"];
        if (!opts.is_array() || opts.size() != 4) {
            line_error(path, lineno, "'options' must hold exactly 4 strings");
        }
        for (std::size_t i = 0; i < 4; ++i) s.options[i] = opts[i].get<std::string>();
        const std::string answer = row["answer"].get<std::string>();
        if (answer.size() != 1 || answer[0] < 'A' || answer[0] > 'D') {
            line_error(path, lineno, "'answer' must be one of A-D, got '" + answer + "'");
        }
        s.answer = answer[0];
        s.explanation = row["explanation"].get<std::string>();
        const auto& grid = row["image"];
        if (!grid.is_array() || grid.size() != 8) {
            line_error(path, lineno, "'image' must be an 8x8 grid");
        }
        s.image.reserve(kImageCells);
        for (std::size_t r = 0; r < 8; ++r) {
            if (!grid[r].is_array() || grid[r].size() != 8) {
                line_error(path, lineno, "'image' must be an 8x8 grid");
            }
            for (std::size_t c = 0; c < 8; ++c) {
                const double v = grid[r][c].get<double>();
                if (!(v >= 0.0 && v <= 1.0)) {
                    line_error(path, lineno, "image value " + std::to_string(v) + " outside [0,1]");
                }
                s.image.push_back(v);
            }
        }
        s.caption = row["caption"].get<std::string>();
    } catch (const nlohmann::json::exception& e) {
        line_error(path, lineno, std::string("malformed sample: ") + e.what());
    }
    return s;
}

}  // namespace

void write_jsonl(const std::vector<McqSample>& samples, const std::string& path) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open '" + path + "' for writing");
    for (const auto& s : samples) os << sample_to_json(s).dump() << "\n";
    if (!os) throw std::runtime_error("write to '" + path + "' failed");
}

std::vector<McqSample> read_jsonl(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open '" + path + "'");
    std::vector<McqSample> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        ordered_json row;
        try {
            row = ordered_json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            line_error(path, lineno, std::string("invalid JSON: ") + e.what());
        }
        out.push_back(sample_from_json(row, path, lineno));
    }
    return out;
}

}  // namespace prefalign
