// Copyright (c) 2026, The csmoe Authors
// SPDX-License-Identifier: Apache-2.0
//
// Synthetic multilingual world standing in for encoder features and corpora.
//
// Each language owns a centroid and a table of token embeddings. A frame of
// "speech" is centroid + token embedding + isotropic Gaussian noise. Token
// embeddings are orthogonal to the centroid-difference subspace, so language
// identity and content are linearly separable by construction.
//
// Output vocabulary layout (shared by all tasks):
//   [0, m*V)            source tokens; language j owns [j*V, (j+1)*V)
//   [m*V, m*V + V)      shared translation targets
// ASR targets are the source ids; ST targets are the language's fixed
// bijection of local source ids into the translation range.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "csmoe/autodiff.hpp"
#include "csmoe/projector.hpp"
#include "csmoe/routing.hpp"

namespace csmoe {

struct WorldConfig {
    std::size_t num_languages = 2;  // m
    std::size_t d_in = 16;
    double separation = 6.0;        // min centroid distance in units of noise_sigma
    double noise_sigma = 0.1;
    std::size_t vocab_per_lang = 32;
    double token_separation = 4.0;  // min token-embedding distance in units of noise_sigma

    friend bool operator==(const WorldConfig&, const WorldConfig&) = default;
};

struct LanguageSpec {
    std::size_t index = 0;
    std::vector<double> centroid;
    double noise_sigma = 0.0;
    std::size_t vocab_begin = 0;
    std::size_t vocab_size = 0;
    std::vector<std::vector<double>> token_embeddings;
    std::vector<std::size_t> translation;  // local source id -> shared target id
};

struct World {
    WorldConfig config;
    std::vector<LanguageSpec> languages;

    [[nodiscard]] std::size_t num_languages() const { return languages.size(); }
    [[nodiscard]] std::size_t source_vocab() const { return config.num_languages * config.vocab_per_lang; }
    [[nodiscard]] std::size_t target_vocab() const { return config.vocab_per_lang; }
    [[nodiscard]] std::size_t output_vocab() const { return source_vocab() + target_vocab(); }
    [[nodiscard]] std::size_t translate_id(std::size_t language, std::size_t local) const {
        return source_vocab() + languages[language].translation[local];
    }
};

namespace detail {

inline double distance(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return std::sqrt(s);
}

inline double min_pairwise_distance(const std::vector<std::vector<double>>& pts) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < pts.size(); ++i) {
        for (std::size_t j = i + 1; j < pts.size(); ++j) best = std::min(best, distance(pts[i], pts[j]));
    }
    return best;
}

// Orthonormal basis of span(vectors) by modified Gram-Schmidt.
inline std::vector<std::vector<double>> orthonormal_basis(const std::vector<std::vector<double>>& vectors) {
    std::vector<std::vector<double>> basis;
    for (auto v : vectors) {
        for (const auto& b : basis) {
            double dot = 0.0;
            for (std::size_t i = 0; i < v.size(); ++i) dot += v[i] * b[i];
            for (std::size_t i = 0; i < v.size(); ++i) v[i] -= dot * b[i];
        }
        double norm = 0.0;
        for (double x : v) norm += x * x;
        norm = std::sqrt(norm);
        if (norm < 1e-9) continue;
        for (double& x : v) x /= norm;
        basis.push_back(std::move(v));
    }
    return basis;
}

}  // namespace detail

inline World gen_world(const WorldConfig& cfg, std::uint64_t seed) {
    if (cfg.num_languages < 2) throw ArgumentError("gen_world: need at least 2 languages");
    if (!(cfg.separation > 0.0)) throw ArgumentError("gen_world: separation must be positive");
    if (!(cfg.noise_sigma > 0.0) || !(cfg.token_separation > 0.0)) {
        throw ArgumentError("gen_world: noise_sigma and token_separation must be positive");
    }
    if (cfg.vocab_per_lang < 2) throw ArgumentError("gen_world: vocab_per_lang must be >= 2");
    // Centroid differences span up to m-1 dimensions; content needs at least one more.
    if (cfg.d_in < cfg.num_languages) {
        throw ArgumentError("gen_world: d_in=" + std::to_string(cfg.d_in) + " cannot separate " +
                            std::to_string(cfg.num_languages) + " language centroids from token content");
    }
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    const std::size_t m = cfg.num_languages, d = cfg.d_in, v = cfg.vocab_per_lang;

    std::vector<std::vector<double>> centroids(m, std::vector<double>(d));
    for (auto& c : centroids) {
        for (double& x : c) x = normal(rng);
    }
    std::vector<double> mean(d, 0.0);
    for (const auto& c : centroids) {
        for (std::size_t i = 0; i < d; ++i) mean[i] += c[i] / static_cast<double>(m);
    }
    for (auto& c : centroids) {
        for (std::size_t i = 0; i < d; ++i) c[i] -= mean[i];
    }
    const double cmin = detail::min_pairwise_distance(centroids);
    if (!(cmin > 0.0)) throw ArgumentError("gen_world: degenerate centroid draw");
    const double cscale = cfg.separation * cfg.noise_sigma / cmin;
    for (auto& c : centroids) {
        for (double& x : c) x *= cscale;
    }
    std::vector<std::vector<double>> diffs;
    for (std::size_t j = 1; j < m; ++j) {
        std::vector<double> diff(d);
        for (std::size_t i = 0; i < d; ++i) diff[i] = centroids[j][i] - centroids[0][i];
        diffs.push_back(std::move(diff));
    }
    const auto basis = detail::orthonormal_basis(diffs);

    World world{cfg, {}};
    for (std::size_t j = 0; j < m; ++j) {
        LanguageSpec lang;
        lang.index = j;
        lang.centroid = centroids[j];
        lang.noise_sigma = cfg.noise_sigma;
        lang.vocab_begin = j * v;
        lang.vocab_size = v;
        lang.token_embeddings.assign(v, std::vector<double>(d));
        for (auto& e : lang.token_embeddings) {
            for (double& x : e) x = normal(rng);
            for (const auto& b : basis) {
                double dot = 0.0;
                for (std::size_t i = 0; i < d; ++i) dot += e[i] * b[i];
                for (std::size_t i = 0; i < d; ++i) e[i] -= dot * b[i];
            }
        }
        const double emin = detail::min_pairwise_distance(lang.token_embeddings);
        if (!(emin > 0.0)) throw ArgumentError("gen_world: degenerate token embedding draw");
        const double escale = cfg.token_separation * cfg.noise_sigma / emin;
        for (auto& e : lang.token_embeddings) {
            for (double& x : e) x *= escale;
        }
        lang.translation.resize(v);
        std::iota(lang.translation.begin(), lang.translation.end(), std::size_t{0});
        std::shuffle(lang.translation.begin(), lang.translation.end(), rng);
        world.languages.push_back(std::move(lang));
    }
    return world;
}

enum class Task { asr, st, csst };

inline const char* task_name(Task t) {
    switch (t) {
        case Task::asr: return "asr";
        case Task::st: return "st";
        case Task::csst: return "csst";
    }
    return "?";
}

inline Task parse_task(const std::string& s) {
    if (s == "asr") return Task::asr;
    if (s == "st") return Task::st;
    if (s == "csst") return Task::csst;
    throw ArgumentError("unknown task '" + s + "'");
}

struct Segment {
    std::size_t begin = 0;
    std::size_t end = 0;  // exclusive
    std::size_t language = 0;

    friend bool operator==(const Segment&, const Segment&) = default;
};

struct Utterance {
    Tensor features;                         // T x d_in
    std::vector<std::size_t> source_tokens;  // global source ids
    std::vector<std::size_t> targets;        // output-vocabulary ids
    Task task = Task::asr;
    LanguageLabel language;                  // code-switched marker for CS utterances
    std::vector<Segment> segments;           // ground-truth spans; analytics only

    [[nodiscard]] std::size_t length() const { return targets.size(); }

    /// Per-position ground-truth language (from segments for CS utterances).
    [[nodiscard]] std::vector<LanguageLabel> oracle_languages() const {
        std::vector<LanguageLabel> out(length(), language);
        for (const auto& s : segments) {
            for (std::size_t t = s.begin; t < s.end; ++t) out[t] = LanguageLabel::of(s.language);
        }
        return out;
    }
};

struct UtteranceOptions {
    std::size_t switch_points = 1;  // CS only
};

/// One utterance of `task`. Monolingual tasks need a concrete language; CS
/// utterances take the code-switched marker and draw their own languages.
inline Utterance gen_utterance(const World& world, LanguageLabel language, Task task, std::size_t length,
                               std::mt19937_64& rng, UtteranceOptions opts = {}) {
    if (length < 1) throw ArgumentError("gen_utterance: length must be >= 1");
    const std::size_t m = world.num_languages();
    std::vector<Segment> segments;
    if (task == Task::csst) {
        if (length < 2) throw ArgumentError("gen_utterance: code-switched utterances need length >= 2");
        if (opts.switch_points < 1 || opts.switch_points >= length) {
            throw ArgumentError("gen_utterance: switch points must lie in [1, length)");
        }
        std::uniform_int_distribution<std::size_t> pick_lang(0, m - 1);
        const std::size_t a = pick_lang(rng);
        std::size_t b = pick_lang(rng);
        while (b == a) b = pick_lang(rng);
        std::vector<std::size_t> cuts(length - 1);
        std::iota(cuts.begin(), cuts.end(), std::size_t{1});
        std::shuffle(cuts.begin(), cuts.end(), rng);
        cuts.resize(opts.switch_points);
        std::sort(cuts.begin(), cuts.end());
        std::size_t begin = 0;
        for (std::size_t s = 0; s <= cuts.size(); ++s) {
            const std::size_t end = s < cuts.size() ? cuts[s] : length;
            segments.push_back(Segment{begin, end, s % 2 == 0 ? a : b});
            begin = end;
        }
        language = LanguageLabel::code_switched();
    } else {
        if (!language.is_concrete() || language.index() >= m) {
            throw ArgumentError("gen_utterance: monolingual task needs a language in [0, m)");
        }
        segments.push_back(Segment{0, length, language.index()});
    }

    const std::size_t d = world.config.d_in;
    const std::size_t v = world.config.vocab_per_lang;
    std::uniform_int_distribution<std::size_t> pick_token(0, v - 1);
    std::normal_distribution<double> noise(0.0, world.config.noise_sigma);
    Utterance utt;
    utt.task = task;
    utt.language = language;
    utt.features = Tensor(Shape{length, d});
    for (const auto& seg : segments) {
        const LanguageSpec& lang = world.languages[seg.language];
        for (std::size_t t = seg.begin; t < seg.end; ++t) {
            const std::size_t local = pick_token(rng);
            for (std::size_t i = 0; i < d; ++i) {
                utt.features.at(t, i) = lang.centroid[i] + lang.token_embeddings[local][i] + noise(rng);
            }
            utt.source_tokens.push_back(lang.vocab_begin + local);
            utt.targets.push_back(task == Task::asr ? lang.vocab_begin + local : world.translate_id(seg.language, local));
        }
    }
    if (task != Task::csst) segments.clear();
    utt.segments = std::move(segments);
    return utt;
}

// ---------------------------------------------------------------------------
// Toy decoder

/// Stand-in for the language model: task prompts prepended to the projected
/// speech, a mean-pooled prompt summary added to every speech position, and a
/// bias-free linear head over the output vocabulary.
struct ToyDecoder {
    Parameter transcribe_prompt;  // P x d_model
    Parameter translate_prompt;   // P x d_model
    Parameter head;               // d_model x V

    std::vector<Parameter*> parameters() { return {&transcribe_prompt, &translate_prompt, &head}; }
    [[nodiscard]] std::size_t d_model() const { return head.value.rows(); }
    [[nodiscard]] std::size_t vocab() const { return head.value.cols(); }
};

inline ToyDecoder init_decoder(std::size_t d_model, std::size_t prompt_len, std::size_t vocab, std::uint64_t seed) {
    if (prompt_len < 1) throw ArgumentError("init_decoder: prompt length must be >= 1");
    std::mt19937_64 rng(seed);
    ToyDecoder dec;
    dec.transcribe_prompt = Parameter("decoder.prompt.transcribe", xavier_uniform(prompt_len, d_model, rng));
    dec.translate_prompt = Parameter("decoder.prompt.translate", xavier_uniform(prompt_len, d_model, rng));
    dec.head = Parameter("decoder.head", xavier_uniform(d_model, vocab, rng));
    return dec;
}

/// Per-position logits [T x V] for projected speech h_s [T x d_model].
inline Var decode(Tape& tape, ToyDecoder& dec, const Var& speech, Task task) {
    const Tensor& sv = speech.value();
    if (sv.rank() != 2 || sv.cols() != dec.d_model()) {
        throw DimensionError("decode: speech " + shape_str(sv.shape()) + " but d_model=" + std::to_string(dec.d_model()));
    }
    Parameter& prompt_param = task == Task::asr ? dec.transcribe_prompt : dec.translate_prompt;
    const std::size_t plen = prompt_param.value.rows();
    const Var prompt = tape.parameter(prompt_param);
    const Var joint = concat({prompt, speech}, 0);
    const Var summary = mean_rows(slice_rows(joint, 0, plen));
    const Var positions = slice_rows(joint, plen, plen + sv.rows());
    return matmul(add_row(positions, summary), tape.parameter(dec.head));
}

// ---------------------------------------------------------------------------
// Corpora

struct Dataset {
    std::string name;
    Task task = Task::asr;
    std::vector<Utterance> utterances;

    [[nodiscard]] std::size_t num_tokens() const {
        std::size_t n = 0;
        for (const auto& u : utterances) n += u.length();
        return n;
    }
};

struct DataConfig {
    std::size_t train_per_split = 400;
    std::size_t val_per_split = 100;
    std::size_t cs_train = 400;
    std::size_t cs_val = 400;
    std::size_t min_length = 8;
    std::size_t max_length = 12;
    std::size_t switch_points = 1;

    friend bool operator==(const DataConfig&, const DataConfig&) = default;
};

inline std::string split_name(Task task, std::optional<std::size_t> language, bool train) {
    std::string s = task_name(task);
    if (language) s += "." + std::to_string(*language);
    return s + (train ? ".train" : ".val");
}

struct SplitSpec {
    std::string name;
    Task task;
    std::optional<std::size_t> language;
    std::size_t count;
};

/// Every split the corpus contains: {asr, st} x languages x {train, val} plus
/// csst {train, val}, in a fixed order.
inline std::vector<SplitSpec> corpus_splits(const World& world, const DataConfig& dc) {
    std::vector<SplitSpec> out;
    for (bool train : {true, false}) {
        for (Task task : {Task::asr, Task::st}) {
            for (std::size_t j = 0; j < world.num_languages(); ++j) {
                out.push_back({split_name(task, j, train), task, j, train ? dc.train_per_split : dc.val_per_split});
            }
        }
        out.push_back({split_name(Task::csst, std::nullopt, train), Task::csst, std::nullopt,
                       train ? dc.cs_train : dc.cs_val});
    }
    return out;
}

inline Dataset gen_split(const World& world, const DataConfig& dc, const SplitSpec& spec, std::uint64_t seed,
                         std::size_t split_index) {
    if (dc.min_length < 1 || dc.max_length < dc.min_length) throw ArgumentError("data: bad length range");
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(split_index), 0x5eedu};
    std::mt19937_64 rng(seq);
    std::uniform_int_distribution<std::size_t> pick_len(dc.min_length, dc.max_length);
    Dataset ds{spec.name, spec.task, {}};
    ds.utterances.reserve(spec.count);
    for (std::size_t u = 0; u < spec.count; ++u) {
        const std::size_t len = pick_len(rng);
        const LanguageLabel lang = spec.language ? LanguageLabel::of(*spec.language) : LanguageLabel::code_switched();
        ds.utterances.push_back(gen_utterance(world, lang, spec.task, len, rng, {dc.switch_points}));
    }
    return ds;
}

using Corpus = std::map<std::string, Dataset>;

/// Generates every split. Splits use independent seeded streams, so the
/// result does not depend on `threads`.
inline Corpus gen_corpus(const World& world, const DataConfig& dc, std::uint64_t seed, std::size_t threads = 1) {
    const auto specs = corpus_splits(world, dc);
    std::vector<Dataset> out(specs.size());
    threads = std::clamp<std::size_t>(threads, 1, specs.size());
    if (threads == 1) {
        for (std::size_t i = 0; i < specs.size(); ++i) out[i] = gen_split(world, dc, specs[i], seed, i);
    } else {
        std::vector<std::thread> pool;
        std::vector<std::exception_ptr> errors(threads);
        for (std::size_t w = 0; w < threads; ++w) {
            pool.emplace_back([&, w] {
                try {
                    for (std::size_t i = w; i < specs.size(); i += threads) {
                        out[i] = gen_split(world, dc, specs[i], seed, i);
                    }
                } catch (...) {
                    errors[w] = std::current_exception();
                }
            });
        }
        for (auto& t : pool) t.join();
        for (auto& e : errors) {
            if (e) std::rethrow_exception(e);
        }
    }
    Corpus corpus;
    for (auto& ds : out) corpus.emplace(ds.name, std::move(ds));
    return corpus;
}

inline const Dataset& require_split(const Corpus& corpus, const std::string& name) {
    const auto it = corpus.find(name);
    if (it == corpus.end()) throw ArgumentError("dataset split '" + name + "' not found");
    return it->second;
}

// ---------------------------------------------------------------------------
// Batches

/// Utterances stacked along the token axis.
struct Batch {
    Tensor features;                        // sum(T) x d_in
    std::vector<std::size_t> targets;
    std::vector<LanguageLabel> labels;      // training-visible labels (CS tokens unlabeled)
    std::vector<LanguageLabel> oracle;      // ground truth from segments
    Task task = Task::asr;

    [[nodiscard]] std::size_t num_tokens() const { return targets.size(); }
};

inline Batch make_batch(std::span<const Utterance* const> utts) {
    if (utts.empty()) throw ArgumentError("make_batch: no utterances");
    Batch b;
    b.task = utts[0]->task;
    const std::size_t d = utts[0]->features.cols();
    std::vector<double> feats;
    for (const Utterance* u : utts) {
        if (u->task != b.task) throw ArgumentError("make_batch: mixed tasks in one batch");
        if (u->features.cols() != d) throw DimensionError("make_batch: feature widths differ");
        feats.insert(feats.end(), u->features.data().begin(), u->features.data().end());
        b.targets.insert(b.targets.end(), u->targets.begin(), u->targets.end());
        b.labels.insert(b.labels.end(), u->length(), u->language);
        const auto oracle = u->oracle_languages();
        b.oracle.insert(b.oracle.end(), oracle.begin(), oracle.end());
    }
    b.features = Tensor(Shape{b.targets.size(), d}, std::move(feats));
    return b;
}

inline Batch make_batch(const Dataset& ds) {
    std::vector<const Utterance*> ptrs;
    for (const auto& u : ds.utterances) ptrs.push_back(&u);
    return make_batch(ptrs);
}

/// Shuffled epoch-wise sampling without replacement over one or more datasets.
class BatchSampler {
public:
    BatchSampler(std::vector<const Dataset*> sources, std::size_t batch_size, std::uint64_t seed)
        : batch_size_(batch_size), rng_(seed) {
        if (batch_size_ < 1) throw ArgumentError("batch size must be >= 1");
        for (const Dataset* ds : sources) {
            for (const auto& u : ds->utterances) pool_.push_back(&u);
        }
        if (pool_.empty()) throw ArgumentError("batch sampler: empty dataset");
        order_.resize(pool_.size());
        std::iota(order_.begin(), order_.end(), std::size_t{0});
        cursor_ = order_.size();
    }

    Batch next() {
        std::vector<const Utterance*> picked;
        while (picked.size() < batch_size_) {
            if (cursor_ == order_.size()) {
                std::shuffle(order_.begin(), order_.end(), rng_);
                cursor_ = 0;
                ++epoch_;
            }
            picked.push_back(pool_[order_[cursor_++]]);
        }
        return make_batch(picked);
    }

    [[nodiscard]] std::size_t epoch() const { return epoch_; }

private:
    std::size_t batch_size_;
    std::mt19937_64 rng_;
    std::vector<const Utterance*> pool_;
    std::vector<std::size_t> order_;
    std::size_t cursor_ = 0;
    std::size_t epoch_ = 0;
};

}  // namespace csmoe
