#pragma once

#include <cstdint>
#include <deque>
#include <optional>
#include <string>
#include <vector>

#include "nictkit/nict_sim.hpp"
#include "nictkit/random.hpp"

namespace nictkit {

struct QueueVolume {
    std::string id;
    NictKind kind = NictKind::LowDose;
    std::size_t num_slices = 0;
};

struct SliceRef {
    std::size_t volume = 0;  // index into the corpus
    std::size_t slice = 0;
    bool operator==(const SliceRef&) const = default;
};

struct QueueEvent {
    std::size_t epoch = 0;
    std::size_t loaded = 0;
    std::optional<std::size_t> evicted;
};

// Bookkeeping for queued training. Holds at most `capacity` volumes, walks
// the corpus in a seeded order per epoch and keeps every setting kind of the
// corpus resident whenever capacity allows it. No pixel data lives here.
class VolumeQueue {
public:
    VolumeQueue(std::vector<QueueVolume> corpus, std::size_t capacity, std::uint64_t seed);

    // Evicts one volume and loads the next one of this epoch, then reshuffles
    // the slice list over everything resident. Throws CorpusExhausted once
    // every volume of the epoch has been loaded.
    void refill();
    void start_epoch();

    // Next slice; refills (and rolls the epoch) when the list runs dry.
    SliceRef next();

    const std::vector<QueueVolume>& corpus() const { return corpus_; }
    std::size_t capacity() const { return capacity_; }
    const std::deque<std::size_t>& resident() const { return resident_; }  // oldest first
    bool is_resident(std::size_t volume) const;
    std::size_t pending() const { return slices_.size() - cursor_; }
    std::size_t refills() const { return refills_; }
    std::size_t epoch() const { return epoch_; }
    std::size_t consumed() const { return consumed_; }
    const std::vector<std::size_t>& epoch_loads() const { return epoch_loads_; }
    const std::vector<QueueEvent>& events() const { return events_; }
    bool kinds_covered() const;

    // drops the event history; long runs call this to bound memory
    void clear_events() { events_.clear(); }

private:
    void load(std::size_t volume, std::optional<std::size_t> evicted);
    void reshuffle();
    bool covers(const std::vector<std::size_t>& volumes) const;

    std::vector<QueueVolume> corpus_;
    std::size_t capacity_;
    Rng rng_;
    std::vector<NictKind> kinds_;
    bool enforce_kinds_ = false;

    std::deque<std::size_t> resident_;
    std::vector<std::size_t> order_;  // remaining volumes of this epoch, front first
    std::size_t order_pos_ = 0;
    std::vector<SliceRef> slices_;
    std::size_t cursor_ = 0;

    std::size_t refills_ = 0;
    std::size_t epoch_ = 0;
    std::size_t consumed_ = 0;
    std::vector<std::size_t> epoch_loads_;
    std::vector<QueueEvent> events_;
};

}  // namespace nictkit
