#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "prefalign/model.hpp"
#include "prefalign/sft.hpp"
#include "prefalign/taskgen.hpp"

namespace prefalign {

struct Candidate {
    std::string text;
    std::string source;  // unique tag within its set, e.g. "seed-3" or "ckpt1-seed-0"
    std::uint64_t seed = 0;
};

struct CandidateSet {
    std::string sample_id;
    std::string prompt;
    std::optional<ImageGrid> image;
    std::vector<Candidate> candidates;
};

struct Ranking {
    std::vector<int> order;   // permutation of candidate indices, best first
    std::string ranker_id;
    std::string rationale;
    bool downgraded = false;  // an external ranking that fell back to the oracle
};

struct PreferencePair {
    std::string id;
    std::string prompt;
    std::optional<ImageGrid> image;
    std::string chosen;
    std::string rejected;
    int chosen_rank = 1;
    int rejected_rank = 0;  // position of the rejected candidate, in [2, K]
    std::string chosen_source;
    std::string rejected_source;
};

struct CandidateGenConfig {
    std::vector<std::string> checkpoints;  // model checkpoint paths; K % |checkpoints| == 0
    InputSetting setting = InputSetting::text_image_caption;
    double temperature = 0.8;
    int top_k = 20;
    int max_new_tokens = 24;
    std::uint64_t seed = 0;
    int workers = 4;
};

struct CandidateBuild {
    std::vector<CandidateSet> sets;  // input sample order, minus dropped samples
    int dropped_samples = 0;
    std::vector<std::string> warnings;
};

// K candidates per sample from the cross product of checkpoints x sampling
// seeds. Deterministic per (sample index, slot) regardless of worker count.
// A generation failure on any slot drops that whole sample with a warning.
CandidateBuild generate_candidates(const CandidateGenConfig& config,
                                   const std::vector<McqSample>& samples, int k);

// Bag-of-tokens Jaccard overlap between two whitespace-tokenized strings, in
// [0,1]. Two empty bags count as identical (1.0).
double token_overlap(const std::string& a, const std::string& b);

// Oracle quality score of one response against the gold sample:
// 2*[extracted letter == gold.answer] + token_overlap(response explanation,
// gold explanation). Range [0, 3]; shared by oracle ranking and the oracle
// reward used during alignment.
double oracle_response_score(const McqSample& gold, const std::string& response);

// Pure function of (candidates, gold): candidates ordered by descending
// oracle_response_score, ties broken by lower candidate index.
Ranking rank_oracle(const CandidateSet& set, const McqSample& gold);

struct ExternalRankerConfig {
    std::string endpoint;  // e.g. "http://127.0.0.1:8080/rank"
    int retries = 2;       // extra attempts after the first failed one
    int timeout_ms = 5000;
    // Bearer credential; when empty the PREFALIGN_RANKER_KEY environment
    // variable is used, and when that is unset no auth header is sent.
    std::string api_key;
};

struct RankerStats {
    int requests = 0;         // HTTP attempts, including retries
    int invalid_replies = 0;  // parse/permutation failures
    int downgrades = 0;       // sets that fell back to the oracle
};

// One JSON request carrying the prompt, the K candidate texts, and a fixed
// ranking rubric; expects {"order": [permutation]} back. Invalid or failed
// replies retry up to config.retries times, then the oracle ranking is
// returned with `downgraded` set and a warning on stderr.
Ranking rank_external(const CandidateSet& set, const McqSample& gold,
                      const ExternalRankerConfig& config, RankerStats* stats = nullptr);

// Ranks every set against its gold sample (matched by index) with at most
// `concurrency` in-flight requests; results keep set order.
std::vector<Ranking> rank_all_external(const std::vector<CandidateSet>& sets,
                                       const std::vector<McqSample>& golds,
                                       const ExternalRankerConfig& config, int concurrency = 4,
                                       RankerStats* stats = nullptr);

struct PairBuild {
    std::vector<PreferencePair> pairs;
    int dropped_duplicates = 0;  // best-vs-other pairs whose texts matched
    std::vector<std::string> warnings;
};

// Pairs the top-ranked candidate with every other one: K candidates yield
// emitted + dropped_duplicates == K-1. Fewer than two candidates yield no
// pairs and a warning. Throws std::invalid_argument on a ranking that is not
// a permutation of the set.
PairBuild make_pairs(const CandidateSet& set, const Ranking& ranking);

// A ranking tagged with the candidate set it orders, as stored on disk.
struct RankedSet {
    std::string sample_id;
    Ranking ranking;
};

// JSONL artifacts between pipeline stages; each read_* validates per line and
// reports failures as "<path>:<line>: <what>".
void write_candidates(const std::vector<CandidateSet>& sets, const std::string& path);
std::vector<CandidateSet> read_candidates(const std::string& path);
void write_rankings(const std::vector<RankedSet>& rows, const std::string& path);
std::vector<RankedSet> read_rankings(const std::string& path);
void write_pairs(const std::vector<PreferencePair>& pairs, const std::string& path);
std::vector<PreferencePair> read_pairs(const std::string& path);

}  // namespace prefalign
