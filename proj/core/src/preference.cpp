#include "prefalign/preference.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <initializer_list>
#include <iostream>
#include <map>
#include <mutex>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "prefalign/evalharness.hpp"
#include "prefalign/rng.hpp"

namespace prefalign {

namespace {

using ordered_json = nlohmann::ordered_json;

constexpr const char* kRankingRubric =
    "Rank the candidate answers to the question from best to worst, judging "
    "correctness of the final answer first and coherence of the reasoning "
    "second. Reply with JSON {\"order\": [...]} listing every candidate index "
    "exactly once, best first.";

}  // namespace

CandidateBuild generate_candidates(const CandidateGenConfig& config,
                                   const std::vector<McqSample>& samples, int k) {
    if (k < 2) throw std::invalid_argument("generate_candidates: K must be at least 2");
    if (config.checkpoints.empty()) {
        throw std::invalid_argument("generate_candidates: at least one checkpoint is required");
    }
    const int n_ckpt = static_cast<int>(config.checkpoints.size());
    if (k % n_ckpt != 0) {
        throw std::invalid_argument("generate_candidates: K=" + std::to_string(k) +
                                    " is not divisible by " + std::to_string(n_ckpt) +
                                    " checkpoints");
    }
    const int seeds_per_ckpt = k / n_ckpt;

    std::vector<PolicyModel> models;
    models.reserve(config.checkpoints.size());
    for (const auto& path : config.checkpoints) models.push_back(PolicyModel::load(path));

    struct Slot {
        int ckpt;
        std::uint64_t seed;
        std::string tag;
    };
    std::vector<Slot> slots;
    for (int c = 0; c < n_ckpt; ++c) {
        for (int s = 0; s < seeds_per_ckpt; ++s) {
            std::string tag = (n_ckpt == 1)
                                  ? "seed-" + std::to_string(s)
                                  : "ckpt" + std::to_string(c) + "-seed-" + std::to_string(s);
            slots.push_back({c, static_cast<std::uint64_t>(s), std::move(tag)});
        }
    }

    std::vector<std::optional<CandidateSet>> results(samples.size());
    std::vector<std::string> failures(samples.size());
    std::atomic<std::size_t> next{0};

    auto worker = [&]() {
        for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= samples.size()) return;
            const McqSample& sample = samples[i];
            auto built = build_prompt(sample, models[0].vocab(), config.setting);

            CandidateSet set;
            set.sample_id = sample.id;
            set.prompt = built.prompt_text;
            set.image = built.image;

            const Rng sample_stream = Rng(config.seed).split(i);
            bool ok = true;
            for (std::size_t slot_idx = 0; slot_idx < slots.size(); ++slot_idx) {
                const Slot& slot = slots[slot_idx];
                Rng gen_rng = sample_stream.split(slot_idx);
                SamplingParams sampling;
                sampling.temperature = config.temperature;
                sampling.top_k = config.top_k;
                sampling.greedy = false;
                try {
                    auto trace = models[static_cast<std::size_t>(slot.ckpt)].generate(
                        built.prompt_ids, built.image, sampling, gen_rng, config.max_new_tokens);
                    if (trace.tokens.empty()) {
                        throw std::runtime_error("generated no tokens (prompt fills the context)");
                    }
                    set.candidates.push_back({trace.text, slot.tag, slot.seed});
                } catch (const std::exception& e) {
                    failures[i] = "sample " + sample.id + " slot " + slot.tag +
                                  " failed to generate: " + e.what();
                    ok = false;
                    break;
                }
            }
            if (ok) results[i] = std::move(set);
        }
    };

    const int n_workers = std::clamp(config.workers, 1, static_cast<int>(samples.size()));
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(n_workers));
    for (int w = 0; w < n_workers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();

    CandidateBuild out;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        if (results[i]) {
            out.sets.push_back(std::move(*results[i]));
        } else {
            out.dropped_samples += 1;
            out.warnings.push_back(failures[i]);
            std::cerr << "warning: " << failures[i] << "\n";
        }
    }
    return out;
}

double token_overlap(const std::string& a, const std::string& b) {
    auto bag = [](const std::string& text) {
        std::map<std::string, long long> counts;
        std::istringstream in(text);
        std::string token;
        while (in >> token) counts[token] += 1;
        return counts;
    };
    const auto bag_a = bag(a);
    const auto bag_b = bag(b);
    long long intersection = 0;
    long long unions = 0;
    for (const auto& [token, count] : bag_a) {
        auto it = bag_b.find(token);
        const long long other = (it == bag_b.end()) ? 0 : it->second;
        intersection += std::min(count, other);
        unions += std::max(count, other);
    }
    for (const auto& [token, count] : bag_b) {
        if (bag_a.find(token) == bag_a.end()) unions += count;
    }
    if (unions == 0) return 1.0;
    return static_cast<double>(intersection) / static_cast<double>(unions);
}

double oracle_response_score(const McqSample& gold, const std::string& response) {
    auto letter = extract_answer(response);
    double score = (letter && *letter == gold.answer) ? 2.0 : 0.0;
    score += token_overlap(response_explanation(response), gold.explanation);
    return score;
}

Ranking rank_oracle(const CandidateSet& set, const McqSample& gold) {
    const std::size_t n = set.candidates.size();
    std::vector<double> scores(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        scores[i] = oracle_response_score(gold, set.candidates[i].text);
    }
    Ranking ranking;
    ranking.order.resize(n);
    std::iota(ranking.order.begin(), ranking.order.end(), 0);
    std::stable_sort(ranking.order.begin(), ranking.order.end(),
                     [&](int x, int y) { return scores[static_cast<std::size_t>(x)] >
                                                scores[static_cast<std::size_t>(y)]; });
    ranking.ranker_id = "oracle";
    return ranking;
}

namespace {

bool parse_endpoint(const std::string& url, std::string& base, std::string& path) {
    const auto scheme_end = url.find("://");
    if (scheme_end == std::string::npos) return false;
    const auto path_start = url.find('/', scheme_end + 3);
    if (path_start == std::string::npos) {
        base = url;
        path = "/";
    } else {
        base = url.substr(0, path_start);
        path = url.substr(path_start);
    }
    return true;
}

bool valid_permutation(const std::vector<int>& order, std::size_t n) {
    if (order.size() != n) return false;
    std::vector<bool> seen(n, false);
    for (int idx : order) {
        if (idx < 0 || static_cast<std::size_t>(idx) >= n || seen[static_cast<std::size_t>(idx)]) {
            return false;
        }
        seen[static_cast<std::size_t>(idx)] = true;
    }
    return true;
}

}  // namespace

Ranking rank_external(const CandidateSet& set, const McqSample& gold,
                      const ExternalRankerConfig& config, RankerStats* stats) {
    RankerStats local;
    std::string why = "no attempt made";

    std::string base;
    std::string path;
    const bool endpoint_ok = parse_endpoint(config.endpoint, base, path);
    if (!endpoint_ok) why = "malformed endpoint '" + config.endpoint + "'";

    std::string key = config.api_key;
    if (key.empty()) {
        if (const char* env = std::getenv("PREFALIGN_RANKER_KEY")) key = env;
    }

    ordered_json request;
    request["prompt"] = set.prompt;
    ordered_json texts = ordered_json::array();
    for (const auto& c : set.candidates) texts.push_back(c.text);
    request["candidates"] = std::move(texts);
    request["instruction"] = kRankingRubric;
    const std::string body = request.dump();

    Ranking ranking;
    const int attempts = endpoint_ok ? config.retries + 1 : 0;
    for (int attempt = 0; attempt < attempts; ++attempt) {
        local.requests += 1;
        httplib::Client client(base);
        client.set_connection_timeout(config.timeout_ms / 1000,
                                      (config.timeout_ms % 1000) * 1000);
        client.set_read_timeout(config.timeout_ms / 1000, (config.timeout_ms % 1000) * 1000);
        httplib::Headers headers;
        if (!key.empty()) headers.emplace("Authorization", "Bearer " + key);

        auto res = client.Post(path, headers, body, "application/json");
        if (!res) {
            why = "request failed: " + httplib::to_string(res.error());
            continue;
        }
        if (res->status != 200) {
            why = "HTTP status " + std::to_string(res->status);
            continue;
        }
        std::vector<int> order;
        try {
            auto reply = ordered_json::parse(res->body);
            order = reply.at("order").get<std::vector<int>>();
        } catch (const nlohmann::json::exception& e) {
            local.invalid_replies += 1;
            why = std::string("unparseable reply: ") + e.what();
            continue;
        }
        if (!valid_permutation(order, set.candidates.size())) {
            local.invalid_replies += 1;
            why = "reply is not a permutation of the candidate indices";
            continue;
        }
        ranking.order = std::move(order);
        ranking.ranker_id = "external";
        if (stats != nullptr) {
            stats->requests += local.requests;
            stats->invalid_replies += local.invalid_replies;
            stats->downgrades += local.downgrades;
        }
        return ranking;
    }

    ranking = rank_oracle(set, gold);
    ranking.downgraded = true;
    ranking.rationale = "external ranker downgraded to oracle: " + why;
    local.downgrades += 1;
    std::cerr << "warning: sample " << set.sample_id << ": " << ranking.rationale << "\n";
    if (stats != nullptr) {
        stats->requests += local.requests;
        stats->invalid_replies += local.invalid_replies;
        stats->downgrades += local.downgrades;
    }
    return ranking;
}

std::vector<Ranking> rank_all_external(const std::vector<CandidateSet>& sets,
                                       const std::vector<McqSample>& golds,
                                       const ExternalRankerConfig& config, int concurrency,
                                       RankerStats* stats) {
    if (sets.size() != golds.size()) {
        throw std::invalid_argument("rank_all_external: sets and golds must pair up");
    }
    std::vector<Ranking> rankings(sets.size());
    std::atomic<std::size_t> next{0};
    std::mutex stats_mutex;

    auto worker = [&]() {
        RankerStats local;
        for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= sets.size()) break;
            rankings[i] = rank_external(sets[i], golds[i], config, &local);
        }
        if (stats != nullptr) {
            std::lock_guard<std::mutex> lock(stats_mutex);
            stats->requests += local.requests;
            stats->invalid_replies += local.invalid_replies;
            stats->downgrades += local.downgrades;
        }
    };

    const int n_workers = std::clamp(concurrency, 1, static_cast<int>(std::max<std::size_t>(
                                                        sets.size(), 1)));
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(n_workers));
    for (int w = 0; w < n_workers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
    return rankings;
}

PairBuild make_pairs(const CandidateSet& set, const Ranking& ranking) {
    PairBuild out;
    const std::size_t k = set.candidates.size();
    if (k < 2) {
        const std::string warning = "sample " + set.sample_id + " has " + std::to_string(k) +
                                    " candidate(s); no pairs emitted";
        out.warnings.push_back(warning);
        std::cerr << "warning: " << warning << "\n";
        return out;
    }
    if (!valid_permutation(ranking.order, k)) {
        throw std::invalid_argument("make_pairs: ranking is not a permutation of the " +
                                    std::to_string(k) + " candidates of sample " + set.sample_id);
    }

    const Candidate& best = set.candidates[static_cast<std::size_t>(ranking.order[0])];
    for (std::size_t pos = 1; pos < k; ++pos) {
        const Candidate& other = set.candidates[static_cast<std::size_t>(ranking.order[pos])];
        if (best.text == other.text) {
            out.dropped_duplicates += 1;
            continue;
        }
        PreferencePair pair;
        pair.id = set.sample_id + "/r" + std::to_string(pos + 1);
        pair.prompt = set.prompt;
        pair.image = set.image;
        pair.chosen = best.text;
        pair.rejected = other.text;
        pair.chosen_rank = 1;
        pair.rejected_rank = static_cast<int>(pos) + 1;
        pair.chosen_source = best.source;
        pair.rejected_source = other.source;
        out.pairs.push_back(std::move(pair));
    }
    return out;
}

namespace {

[[noreturn]] void line_error(const std::string& path, std::size_t lineno, const std::string& what) {
    throw std::runtime_error(path + ":" + std::to_string(lineno) + ": " + what);
}

ordered_json image_to_json(const std::optional<ImageGrid>& image) {
    if (!image) return nullptr;
    ordered_json grid = ordered_json::array();
    for (int r = 0; r < 8; ++r) {
        ordered_json line = ordered_json::array();
        for (int c = 0; c < 8; ++c) {
            line.push_back((*image)[static_cast<std::size_t>(r * 8 + c)]);
        }
        grid.push_back(std::move(line));
    }
    return grid;
}

std::optional<ImageGrid> image_from_json(const ordered_json& grid, const std::string& path,
                                         std::size_t lineno) {
    if (grid.is_null()) return std::nullopt;
    if (!grid.is_array() || grid.size() != 8) {
        line_error(path, lineno, "'image' must be null or an 8x8 grid");
    }
    ImageGrid image;
    image.reserve(kImageCells);
    for (std::size_t r = 0; r < 8; ++r) {
        if (!grid[r].is_array() || grid[r].size() != 8) {
            line_error(path, lineno, "'image' must be null or an 8x8 grid");
        }
        for (std::size_t c = 0; c < 8; ++c) {
            const double v = grid[r][c].get<double>();
            if (!(v >= 0.0 && v <= 1.0)) {
                line_error(path, lineno, "image value " + std::to_string(v) + " outside [0,1]");
            }
            image.push_back(v);
        }
    }
    return image;
}

ordered_json pair_to_json(const PreferencePair& p) {
    ordered_json row;
    row["id"] = p.id;
    row["prompt"] = p.prompt;
    row["image"] = image_to_json(p.image);
    row["chosen"] = p.chosen;
    row["rejected"] = p.rejected;
    row["chosen_rank"] = p.chosen_rank;
    row["rejected_rank"] = p.rejected_rank;
    row["chosen_source"] = p.chosen_source;
    row["rejected_source"] = p.rejected_source;
    return row;
}

PreferencePair pair_from_json(const ordered_json& row, const std::string& path,
                              std::size_t lineno) {
    for (const char* field : {"id", "prompt", "image", "chosen", "rejected", "chosen_rank",
                              "rejected_rank", "chosen_source", "rejected_source"}) {
        if (!row.contains(field)) line_error(path, lineno, std::string("missing field '") + field + "'");
    }
    PreferencePair p;
    try {
        p.id = row["id"].get<std::string>();
        p.prompt = row["prompt"].get<std::string>();
        p.image = image_from_json(row["image"], path, lineno);
        p.chosen = row["chosen"].get<std::string>();
        p.rejected = row["rejected"].get<std::string>();
        p.chosen_rank = row["chosen_rank"].get<int>();
        p.rejected_rank = row["rejected_rank"].get<int>();
        p.chosen_source = row["chosen_source"].get<std::string>();
        p.rejected_source = row["rejected_source"].get<std::string>();
    } catch (const nlohmann::json::exception& e) {
        line_error(path, lineno, std::string("malformed pair: ") + e.what());
    }
    if (p.chosen == p.rejected) line_error(path, lineno, "chosen equals rejected");
    if (p.chosen_rank != 1) {
        line_error(path, lineno, "chosen_rank must be 1, got " + std::to_string(p.chosen_rank));
    }
    if (p.rejected_rank < 2) {
        line_error(path, lineno,
                   "rejected_rank must be at least 2, got " + std::to_string(p.rejected_rank));
    }
    return p;
}

}  // namespace

namespace {

// Parses one JSONL file, handing each non-empty line to `consume` as JSON.
void for_each_jsonl(const std::string& path,
                    const std::function<void(const ordered_json&, std::size_t)>& consume) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open '" + path + "'");
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
        consume(row, lineno);
    }
}

void require_fields(const ordered_json& row, std::initializer_list<const char*> fields,
                    const std::string& path, std::size_t lineno) {
    for (const char* field : fields) {
        if (!row.contains(field)) {
            line_error(path, lineno, std::string("missing field '") + field + "'");
        }
    }
}

}  // namespace

void write_candidates(const std::vector<CandidateSet>& sets, const std::string& path) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open '" + path + "' for writing");
    for (const auto& set : sets) {
        ordered_json row;
        row["sample_id"] = set.sample_id;
        row["prompt"] = set.prompt;
        row["image"] = image_to_json(set.image);
        ordered_json cands = ordered_json::array();
        for (const auto& c : set.candidates) {
            ordered_json item;
            item["text"] = c.text;
            item["source"] = c.source;
            item["seed"] = c.seed;
            cands.push_back(std::move(item));
        }
        row["candidates"] = std::move(cands);
        os << row.dump() << "\n";
    }
    if (!os) throw std::runtime_error("write to '" + path + "' failed");
}

std::vector<CandidateSet> read_candidates(const std::string& path) {
    std::vector<CandidateSet> out;
    for_each_jsonl(path, [&](const ordered_json& row, std::size_t lineno) {
        require_fields(row, {"sample_id", "prompt", "image", "candidates"}, path, lineno);
        CandidateSet set;
        try {
            set.sample_id = row["sample_id"].get<std::string>();
            set.prompt = row["prompt"].get<std::string>();
            set.image = image_from_json(row["image"], path, lineno);
            for (const auto& item : row["candidates"]) {
                require_fields(item, {"text", "source", "seed"}, path, lineno);
                Candidate c;
                c.text = item["text"].get<std::string>();
                c.source = item["source"].get<std::string>();
                c.seed = item["seed"].get<std::uint64_t>();
                set.candidates.push_back(std::move(c));
            }
        } catch (const nlohmann::json::exception& e) {
            line_error(path, lineno, std::string("malformed candidate set: ") + e.what());
        }
        if (set.candidates.empty()) line_error(path, lineno, "candidate set is empty");
        out.push_back(std::move(set));
    });
    return out;
}

void write_rankings(const std::vector<RankedSet>& rows, const std::string& path) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open '" + path + "' for writing");
    for (const auto& row : rows) {
        ordered_json j;
        j["sample_id"] = row.sample_id;
        j["order"] = row.ranking.order;
        j["ranker_id"] = row.ranking.ranker_id;
        j["downgraded"] = row.ranking.downgraded;
        j["rationale"] = row.ranking.rationale;
        os << j.dump() << "\n";
    }
    if (!os) throw std::runtime_error("write to '" + path + "' failed");
}

std::vector<RankedSet> read_rankings(const std::string& path) {
    std::vector<RankedSet> out;
    for_each_jsonl(path, [&](const ordered_json& row, std::size_t lineno) {
        require_fields(row, {"sample_id", "order", "ranker_id", "downgraded", "rationale"}, path,
                       lineno);
        RankedSet ranked;
        try {
            ranked.sample_id = row["sample_id"].get<std::string>();
            ranked.ranking.order = row["order"].get<std::vector<int>>();
            ranked.ranking.ranker_id = row["ranker_id"].get<std::string>();
            ranked.ranking.downgraded = row["downgraded"].get<bool>();
            ranked.ranking.rationale = row["rationale"].get<std::string>();
        } catch (const nlohmann::json::exception& e) {
            line_error(path, lineno, std::string("malformed ranking: ") + e.what());
        }
        if (ranked.ranking.order.empty()) line_error(path, lineno, "ranking order is empty");
        out.push_back(std::move(ranked));
    });
    return out;
}

void write_pairs(const std::vector<PreferencePair>& pairs, const std::string& path) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open '" + path + "' for writing");
    for (const auto& p : pairs) os << pair_to_json(p).dump() << "\n";
    if (!os) throw std::runtime_error("write to '" + path + "' failed");
}

std::vector<PreferencePair> read_pairs(const std::string& path) {
    std::vector<PreferencePair> out;
    for_each_jsonl(path, [&](const ordered_json& row, std::size_t lineno) {
        out.push_back(pair_from_json(row, path, lineno));
    });
    return out;
}

}  // namespace prefalign
