#include "nictkit/queue.hpp"

#include <algorithm>

#include "nictkit/error.hpp"

namespace nictkit {

VolumeQueue::VolumeQueue(std::vector<QueueVolume> corpus, std::size_t capacity, std::uint64_t seed)
    : corpus_(std::move(corpus)), capacity_(capacity), rng_(seed) {
    if (corpus_.empty()) throw InvalidConfig("queue: corpus is empty");
    if (capacity_ == 0) throw InvalidConfig("queue: capacity must be >= 1");
    for (const auto& v : corpus_) {
        if (v.num_slices == 0) throw InvalidConfig("queue: volume '" + v.id + "' has no slices");
        if (std::find(kinds_.begin(), kinds_.end(), v.kind) == kinds_.end()) kinds_.push_back(v.kind);
    }
    enforce_kinds_ = capacity_ >= kinds_.size();
    epoch_loads_.assign(corpus_.size(), 0);

    order_.resize(corpus_.size());
    for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
    rng_.shuffle(order_.begin(), order_.end());

    // one of each kind up front so coverage holds from the first step
    std::vector<std::size_t> head, tail;
    std::vector<NictKind> seen;
    for (std::size_t v : order_) {
        if (std::find(seen.begin(), seen.end(), corpus_[v].kind) == seen.end()) {
            seen.push_back(corpus_[v].kind);
            head.push_back(v);
        } else {
            tail.push_back(v);
        }
    }
    order_ = head;
    order_.insert(order_.end(), tail.begin(), tail.end());

    while (resident_.size() < capacity_ && order_pos_ < order_.size()) load(order_[order_pos_++], std::nullopt);
    reshuffle();
}

bool VolumeQueue::is_resident(std::size_t volume) const {
    return std::find(resident_.begin(), resident_.end(), volume) != resident_.end();
}

bool VolumeQueue::covers(const std::vector<std::size_t>& volumes) const {
    for (NictKind k : kinds_) {
        const bool present =
            std::any_of(volumes.begin(), volumes.end(), [&](std::size_t v) { return corpus_[v].kind == k; });
        if (!present) return false;
    }
    return true;
}

bool VolumeQueue::kinds_covered() const { return covers({resident_.begin(), resident_.end()}); }

void VolumeQueue::load(std::size_t volume, std::optional<std::size_t> evicted) {
    if (evicted) resident_.erase(std::find(resident_.begin(), resident_.end(), *evicted));
    const auto it = std::find(resident_.begin(), resident_.end(), volume);
    if (it != resident_.end()) resident_.erase(it);
    resident_.push_back(volume);
    ++consumed_;
    ++epoch_loads_[volume];
    events_.push_back({epoch_, volume, evicted});
}

void VolumeQueue::reshuffle() {
    slices_.clear();
    for (std::size_t v : resident_)
        for (std::size_t s = 0; s < corpus_[v].num_slices; ++s) slices_.push_back({v, s});
    rng_.shuffle(slices_.begin(), slices_.end());
    cursor_ = 0;
}

void VolumeQueue::start_epoch() {
    ++epoch_;
    std::fill(epoch_loads_.begin(), epoch_loads_.end(), 0);
    order_.clear();
    for (std::size_t v = 0; v < corpus_.size(); ++v)
        if (!is_resident(v)) order_.push_back(v);
    rng_.shuffle(order_.begin(), order_.end());
    order_.insert(order_.end(), resident_.begin(), resident_.end());
    order_pos_ = 0;
}

void VolumeQueue::refill() {
    if (order_pos_ >= order_.size()) throw CorpusExhausted("epoch " + std::to_string(epoch_) + " complete");
    std::size_t incoming = order_[order_pos_];

    if (is_resident(incoming) || resident_.size() < capacity_) {
        ++order_pos_;
        load(incoming, std::nullopt);
    } else {
        const std::size_t oldest = resident_.front();
        auto after = [&](std::size_t out, std::size_t in) {
            std::vector<std::size_t> vs;
            for (std::size_t v : resident_)
                if (v != out) vs.push_back(v);
            vs.push_back(in);
            return vs;
        };
        std::size_t victim = oldest;
        if (enforce_kinds_ && !covers(after(oldest, incoming))) {
            // bring forward the next volume that replaces the oldest's kind
            auto it = std::find_if(order_.begin() + static_cast<std::ptrdiff_t>(order_pos_) + 1, order_.end(),
                                   [&](std::size_t v) { return corpus_[v].kind == corpus_[oldest].kind; });
            if (it != order_.end()) {
                std::rotate(order_.begin() + static_cast<std::ptrdiff_t>(order_pos_), it, it + 1);
                incoming = order_[order_pos_];
                if (is_resident(incoming)) {
                    ++order_pos_;
                    load(incoming, std::nullopt);
                    ++refills_;
                    reshuffle();
                    return;
                }
            } else {
                for (std::size_t v : resident_) {
                    if (covers(after(v, incoming))) {
                        victim = v;
                        break;
                    }
                }
            }
        }
        ++order_pos_;
        load(incoming, victim);
    }
    ++refills_;
    reshuffle();
}

SliceRef VolumeQueue::next() {
    if (cursor_ >= slices_.size()) {
        try {
            refill();
        } catch (const CorpusExhausted&) {
            start_epoch();
            refill();
        }
    }
    return slices_[cursor_++];
}

}  // namespace nictkit
