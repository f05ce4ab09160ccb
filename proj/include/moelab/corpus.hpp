#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "moelab/common.hpp"
#include "moelab/model.hpp"
#include "moelab/rng.hpp"

namespace moelab {

// Byte-level corpus with a disjoint train/validation split. Tokens are the
// 256 byte values plus BOS/EOS/PAD specials.
struct Corpus {
    std::vector<std::uint8_t> bytes;
    std::size_t train_end = 0;  // [0, train_end) train, [train_end, size) validation

    std::size_t size() const { return bytes.size(); }
    std::size_t train_size() const { return train_end; }
    std::size_t valid_size() const { return bytes.size() - train_end; }

    static Corpus from_bytes(std::vector<std::uint8_t> data, double train_fraction = 0.9) {
        if (train_fraction <= 0.0 || train_fraction >= 1.0)
            throw ParameterError("corpus: train fraction must lie in (0, 1)");
        Corpus c;
        c.bytes = std::move(data);
        if (c.bytes.size() < 1024) throw ParameterError("corpus: too small");
        c.train_end = static_cast<std::size_t>(static_cast<double>(c.bytes.size()) * train_fraction);
        return c;
    }

    static Corpus load_file(const std::string& path, double train_fraction = 0.9) {
        std::ifstream is(path, std::ios::binary);
        if (!is) throw IoError("cannot open corpus: " + path);
        std::vector<std::uint8_t> data((std::istreambuf_iterator<char>(is)),
                                       std::istreambuf_iterator<char>());
        return from_bytes(std::move(data), train_fraction);
    }
};

// Deterministic public-domain-by-construction sample text with deliberate
// difficulty spread: function words and boilerplate are easy, per-paragraph
// entity names are hard-but-learnable (they repeat, so context carries them),
// and identifier-heavy code blocks sit in between. Token populations differ
// enough for routing statistics to show structure.
inline std::vector<std::uint8_t> synthesize_corpus_bytes(std::size_t min_size, std::uint64_t seed) {
    static const char* kNouns[] = {"river",  "engine", "lattice", "signal", "harbor", "meadow",
                                   "kernel", "ledger", "circuit", "garden", "anchor", "beacon",
                                   "mirror", "valley", "thread",  "vessel", "window", "market"};
    static const char* kVerbs[] = {"carries", "holds",   "drives", "shapes", "crosses",
                                   "guards",  "divides", "traces", "gathers", "follows"};
    static const char* kAdjs[] = {"quiet", "narrow", "steady", "bright", "distant",
                                  "heavy", "subtle", "plain",  "rapid",  "uneven"};
    static const char* kFuncs[] = {"scan", "merge", "fold", "probe", "route", "pack"};
    CounterRng rng(seed);
    std::string text;
    text.reserve(min_size + 4096);
    std::uint64_t ctr = 0;
    auto pick = [&](auto& arr, std::size_t n) { return arr[rng.at(ctr++) % n]; };
    auto fresh_name = [&](std::size_t min_len) {
        const std::size_t len = min_len + rng.at(ctr++) % 4;
        std::string s;
        s += static_cast<char>('A' + rng.at(ctr++) % 26);
        for (std::size_t i = 1; i < len; ++i) s += static_cast<char>('a' + rng.at(ctr++) % 26);
        return s;
    };
    while (text.size() < min_size) {
        const std::uint64_t mode = rng.at(ctr++) % 8;
        if (mode < 4) {
            // Prose paragraph around 2-3 recurring invented entities.
            std::vector<std::string> entities;
            for (std::size_t e = 0; e < 2 + rng.at(ctr++) % 2; ++e) entities.push_back(fresh_name(4));
            const std::size_t sentences = 3 + rng.at(ctr++) % 4;
            for (std::size_t s = 0; s < sentences; ++s) {
                std::string sent = entities[rng.at(ctr++) % entities.size()];
                sent += " ";
                sent += pick(kVerbs, 10);
                sent += " the ";
                sent += pick(kAdjs, 10);
                sent += " ";
                sent += pick(kNouns, 18);
                if (rng.at(ctr++) % 2) {
                    sent += " with ";
                    sent += entities[rng.at(ctr++) % entities.size()];
                }
                sent += ". ";
                text += sent;
            }
            text += "\n\n";
        } else if (mode < 6) {
            // Code-like block reusing a couple of invented identifiers.
            const std::string var_a = fresh_name(3), var_b = fresh_name(3);
            const std::size_t lines = 3 + rng.at(ctr++) % 5;
            for (std::size_t ln = 0; ln < lines; ++ln) {
                std::string line = "let ";
                line += ln % 2 ? var_b : var_a;
                line += " = ";
                line += pick(kFuncs, 6);
                line += "(";
                line += ln % 2 ? var_a : var_b;
                line += ", ";
                line += std::to_string(rng.at(ctr++) % 1000);
                line += ");\n";
                text += line;
            }
            text += "\n";
        } else if (mode == 6) {
            // Boilerplate header: highly predictable filler.
            text += "=== section report: all systems nominal, no changes recorded ===\n";
        } else {
            // Numeric table row.
            std::string line;
            for (int c = 0; c < 6; ++c) {
                line += std::to_string(rng.at(ctr++) % 100000);
                line += c + 1 < 6 ? "\t" : "\n";
            }
            text += line;
        }
    }
    return std::vector<std::uint8_t>(text.begin(), text.end());
}

inline Corpus synthetic_corpus(std::size_t min_size, std::uint64_t seed,
                               double train_fraction = 0.9) {
    return Corpus::from_bytes(synthesize_corpus_bytes(min_size, seed), train_fraction);
}

// Draws batch_size windows from the chosen split. Sequences start with BOS;
// next-token and skip-one targets come straight from the byte stream.
inline Batch sample_batch(const Corpus& corpus, std::size_t batch_size, std::size_t seq_len,
                          const CounterRng& rng, bool from_train = true) {
    const std::size_t lo = from_train ? 0 : corpus.train_end;
    const std::size_t hi = from_train ? corpus.train_end : corpus.size();
    check(hi > lo && hi - lo > seq_len + 2, "sample_batch: split too small for seq_len");
    Batch b;
    b.seq_len = seq_len;
    b.tokens.reserve(batch_size * seq_len);
    b.targets_next.reserve(batch_size * seq_len);
    b.targets_skip2.reserve(batch_size * seq_len);
    const std::size_t span = hi - lo - seq_len;
    for (std::size_t s = 0; s < batch_size; ++s) {
        const std::size_t off = lo + rng.at(s) % span;
        for (std::size_t i = 0; i < seq_len; ++i) {
            b.tokens.push_back(i == 0 ? kBosToken : corpus.bytes[off + i - 1]);
            b.targets_next.push_back(corpus.bytes[off + i]);
            b.targets_skip2.push_back(i + 2 < seq_len ? static_cast<int>(corpus.bytes[off + i + 1])
                                                      : -1);
        }
    }
    return b;
}

}  // namespace moelab
