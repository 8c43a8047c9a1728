#pragma once

// A small trained speaker model shared by the model, attack, adaptive and
// harness tests. The checkpoint is cached next to the test binaries.

#include <filesystem>
#include <string>

#include "spkdef/dataset.hpp"
#include "spkdef/model.hpp"

#ifndef SPKDEF_FIXTURE_DIR
#define SPKDEF_FIXTURE_DIR "."
#endif

namespace fixture {

struct Desk {
    spkdef::Corpus corpus;
    spkdef::SpeakerModel model;
};

inline Desk make_desk(std::size_t speakers, std::size_t voices, double duration, std::size_t epochs,
                      const std::string& tag) {
    Desk d;
    d.corpus = spkdef::synthesize_corpus(speakers, voices, duration, 7);
    const auto path = std::filesystem::path(SPKDEF_FIXTURE_DIR) / (tag + ".ckpt");
    if (std::filesystem::exists(path)) {
        d.model = spkdef::SpeakerModel::load(path);
        return d;
    }
    spkdef::ModelConfig mc;
    mc.n_speakers = speakers;
    d.model = spkdef::SpeakerModel(mc, 1);
    spkdef::TrainConfig tc;
    tc.epochs = epochs;
    tc.seed = 1;
    spkdef::train(d.model, d.corpus.train, tc);
    const auto tmp = path.string() + ".tmp";
    d.model.save(tmp);
    std::filesystem::rename(tmp, path);
    return d;
}

// 4 speakers, 10 half-second voices each.
inline const Desk& small_desk() {
    static const Desk d = make_desk(4, 10, 0.5, 15, "small_desk");
    return d;
}

}  // namespace fixture
