#pragma once

#include <algorithm>
#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace avrnet {

// Persistent worker pool with static chunking. Work is divided into a chunk
// count that is a function of the problem only (never the thread count) wherever
// results are accumulated, so outputs are identical for any pool size.
class ThreadPool {
public:
    static ThreadPool& instance() {
        static ThreadPool pool;
        return pool;
    }

    int threads() const { return int(workers_.size()) + 1; }

    void set_threads(int n) {
        if (n < 1) n = 1;
        if (n == threads()) return;
        stop_workers();
        start_workers(n - 1);
    }

    // Runs chunk_fn(c) for c in [0, n_chunks); blocks until all chunks finish.
    // Nested calls from inside a worker run inline on the calling thread.
    void run(int64_t n_chunks, const std::function<void(int64_t)>& chunk_fn) {
        if (n_chunks <= 0) return;
        if (in_worker_ || workers_.empty() || n_chunks == 1) {
            for (int64_t c = 0; c < n_chunks; ++c) chunk_fn(c);
            return;
        }
        {
            std::unique_lock<std::mutex> lk(mu_);
            job_fn_ = &chunk_fn;
            job_total_ = n_chunks;
            job_next_.store(0, std::memory_order_relaxed);
            job_done_ = 0;
            ++job_id_;
        }
        cv_work_.notify_all();
        // the submitting thread participates
        work_chunks(&chunk_fn, n_chunks);
        std::unique_lock<std::mutex> lk(mu_);
        cv_done_.wait(lk, [&] { return job_done_ == job_total_; });
        job_fn_ = nullptr;
    }

    ~ThreadPool() { stop_workers(); }

private:
    ThreadPool() {
        int n = int(std::thread::hardware_concurrency());
        if (const char* env = std::getenv("AVRNET_THREADS")) {
            int v = std::atoi(env);
            if (v >= 1) n = v;
        }
        if (n < 1) n = 1;
        start_workers(n - 1);
    }

    void work_chunks(const std::function<void(int64_t)>* fn, int64_t total) {
        for (;;) {
            int64_t c = job_next_.fetch_add(1, std::memory_order_relaxed);
            if (c >= total) break;
            (*fn)(c);
            std::lock_guard<std::mutex> lk(mu_);
            if (++job_done_ == job_total_) cv_done_.notify_all();
        }
    }

    void worker_loop() {
        in_worker_ = true;
        uint64_t seen = 0;
        for (;;) {
            const std::function<void(int64_t)>* fn = nullptr;
            int64_t total = 0;
            {
                std::unique_lock<std::mutex> lk(mu_);
                cv_work_.wait(lk, [&] { return stop_ || (job_fn_ && job_id_ != seen); });
                if (stop_) return;
                seen = job_id_;
                fn = job_fn_;
                total = job_total_;
            }
            work_chunks(fn, total);
        }
    }

    void start_workers(int n) {
        stop_ = false;
        for (int i = 0; i < n; ++i)
            workers_.emplace_back([this] { worker_loop(); });
    }

    void stop_workers() {
        {
            std::lock_guard<std::mutex> lk(mu_);
            stop_ = true;
        }
        cv_work_.notify_all();
        for (auto& t : workers_) t.join();
        workers_.clear();
    }

    static thread_local bool in_worker_;

    std::vector<std::thread> workers_;
    std::mutex mu_;
    std::condition_variable cv_work_, cv_done_;
    const std::function<void(int64_t)>* job_fn_ = nullptr;
    int64_t job_total_ = 0;
    std::atomic<int64_t> job_next_{0};
    int64_t job_done_ = 0;
    uint64_t job_id_ = 0;
    bool stop_ = false;
};

inline thread_local bool ThreadPool::in_worker_ = false;

// Element-parallel loop over [0, n). Only for bodies with disjoint writes;
// the split cannot affect results.
template <typename Fn>
void parallel_for(int64_t n, Fn&& fn) {
    auto& pool = ThreadPool::instance();
    int64_t chunks = std::min<int64_t>(n, pool.threads());
    if (chunks <= 1) {
        for (int64_t i = 0; i < n; ++i) fn(i);
        return;
    }
    pool.run(chunks, [&](int64_t c) {
        int64_t lo = n * c / chunks, hi = n * (c + 1) / chunks;
        for (int64_t i = lo; i < hi; ++i) fn(i);
    });
}

// Range-parallel loop with a caller-chosen chunk count (use a problem-derived
// count when chunk results are reduced, to keep reductions order-stable).
template <typename Fn>
void parallel_chunks(int64_t n, int64_t n_chunks, Fn&& fn) {
    if (n_chunks > n) n_chunks = n;
    if (n <= 0) return;
    ThreadPool::instance().run(n_chunks, [&](int64_t c) {
        fn(n * c / n_chunks, n * (c + 1) / n_chunks, c);
    });
}

}  // namespace avrnet
