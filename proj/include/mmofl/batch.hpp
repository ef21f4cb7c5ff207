#pragma once

#include <vector>

#include "mmofl/matrix.hpp"

namespace mmofl {

// One client's labelled multimodal mini-dataset for a single global round.
// Unavailable modalities carry an empty data matrix; labels are always kept.
struct RoundBatch {
    std::vector<Matrix> data;        // per modality, window_size x input_dim
    std::vector<int> labels;         // window_size class ids
    std::vector<bool> availability;  // per modality
    int client_id = 0;
    int round_index = 0;

    size_t num_modalities() const { return data.size(); }
    size_t size() const { return labels.size(); }
    bool all_available() const {
        for (bool a : availability)
            if (!a) return false;
        return true;
    }
};

}  // namespace mmofl
