#pragma once

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <functional>
#include <memory>
#include <mutex>
#include <thread>
#include <vector>

namespace cpdiff {

// Chunked parallel-for. Every output index is computed entirely inside one
// chunk and chunk boundaries depend only on `n`, so results are bit-identical
// for any worker count. Must be driven from one orchestrating thread; ops do
// not nest parallel sections.
class ThreadPool {
  public:
    static ThreadPool& instance() {
        static ThreadPool pool;
        return pool;
    }

    void set_threads(int n) {
        stop_workers();
        n_threads_ = n < 1 ? 1 : n;
        start_workers();
    }

    int threads() const { return n_threads_; }

    void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& body) {
        if (n <= 0) return;
        if (n_threads_ <= 1 || n == 1) {
            body(0, n);
            return;
        }
        struct Job {
            std::atomic<int64_t> next{0};
            std::atomic<int64_t> done{0};
            int64_t n = 0;
            int64_t chunk = 0;
            int64_t n_chunks = 0;
            const std::function<void(int64_t, int64_t)>* body = nullptr;
        };
        auto job = std::make_shared<Job>();
        job->n = n;
        job->chunk = (n + n_threads_ * 4 - 1) / (n_threads_ * 4);
        job->n_chunks = (n + job->chunk - 1) / job->chunk;
        job->body = &body;

        // Workers keep the job alive via their copy of the closure; the body
        // pointer is only dereferenced while a chunk is still unclaimed, and
        // parallel_for does not return before every chunk has completed.
        auto run = [job]() {
            for (;;) {
                int64_t c = job->next.fetch_add(1);
                if (c >= job->n_chunks) break;
                int64_t lo = c * job->chunk;
                int64_t hi = lo + job->chunk < job->n ? lo + job->chunk : job->n;
                (*job->body)(lo, hi);
                job->done.fetch_add(1);
            }
        };

        {
            std::lock_guard<std::mutex> lk(mu_);
            task_ = run;
            generation_++;
        }
        cv_.notify_all();
        run();
        while (job->done.load() < job->n_chunks) std::this_thread::yield();
        std::lock_guard<std::mutex> lk(mu_);
        task_ = nullptr;
    }

    ~ThreadPool() { stop_workers(); }

  private:
    ThreadPool() {
        n_threads_ = static_cast<int>(std::thread::hardware_concurrency());
        if (n_threads_ < 1) n_threads_ = 1;
        start_workers();
    }

    void start_workers() {
        stopping_ = false;
        for (int i = 1; i < n_threads_; ++i) {
            workers_.emplace_back([this]() { worker_loop(); });
        }
    }

    void stop_workers() {
        {
            std::lock_guard<std::mutex> lk(mu_);
            stopping_ = true;
            generation_++;
        }
        cv_.notify_all();
        for (auto& t : workers_) t.join();
        workers_.clear();
    }

    void worker_loop() {
        uint64_t seen = 0;
        for (;;) {
            std::function<void()> task;
            {
                std::unique_lock<std::mutex> lk(mu_);
                cv_.wait(lk, [&]() { return stopping_ || (generation_ != seen && task_ != nullptr); });
                if (stopping_) return;
                seen = generation_;
                task = task_;
            }
            if (task) task();
        }
    }

    int n_threads_ = 1;
    std::vector<std::thread> workers_;
    std::mutex mu_;
    std::condition_variable cv_;
    std::function<void()> task_;
    uint64_t generation_ = 0;
    bool stopping_ = false;
};

inline void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& body) {
    ThreadPool::instance().parallel_for(n, body);
}

}  // namespace cpdiff
