#pragma once

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <memory>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "imsty/adam.hpp"
#include "imsty/data.hpp"
#include "imsty/metrics.hpp"
#include "imsty/model.hpp"
#include "imsty/ops.hpp"
#include "imsty/stylization.hpp"
#include "imsty/tensor.hpp"

// Student/teacher training scheme: the teacher is an exponential moving
// average of the student and produces pseudo-labels from target features
// re-dressed in source statistics; pseudo-labels below the confidence
// threshold (classification) or outside the batch-wise keep fraction (pose)
// are masked out of the unsupervised loss.

namespace imsty {

enum class Task { classification, pose };
enum class Method { source_only, mean_teacher_no_style, imsty };

inline const char* task_name(Task t) { return t == Task::classification ? "classification" : "pose"; }
inline const char* method_name(Method m) {
    switch (m) {
        case Method::source_only: return "source_only";
        case Method::mean_teacher_no_style: return "mean_teacher_no_style";
        case Method::imsty: return "imsty";
    }
    return "?";
}

struct TrainConfig {
    double lambda_unsup = 1.0;
    AlphaPolicy alpha_policy{};
    double percentile_p = 50.0;
    double ema_decay = 0.999;
    double lr = 1e-4;
    std::vector<int> lr_decay_epochs = {20, 26};
    double lr_decay_factor = 0.1;
    int total_epochs = 30;
    int pretrain_epochs = 10;
    int batch_size = 32;
    StatScope stat_scope = StatScope::minibatch;
    std::uint64_t seed = 42;

    // Artifact knobs beyond the core schedule.
    double stylize_eps = 1e-5;
    bool stylize_stop_stats_grad = false;
    enum class BetaCollect { both, target_only };
    BetaCollect beta_collect = BetaCollect::both;
    double keep_ratio = 0.5;
    enum class TeacherSourceStats { student, teacher };
    TeacherSourceStats teacher_source_stats = TeacherSourceStats::student;
    bool soft_pseudo_labels = false;
    double heatmap_sigma = 2.0;
    double pck_threshold = 0.05;
    int model_width = 32;
    AugmentSpec augment{};

    void validate() const {
        if (lambda_unsup < 0.0) throw std::invalid_argument("config: lambda_unsup must be >= 0");
        if (percentile_p <= 0.0 || percentile_p > 100.0) {
            throw std::invalid_argument("config: percentile_p must be in (0, 100]");
        }
        if (ema_decay <= 0.0 || ema_decay >= 1.0) {
            throw std::invalid_argument("config: ema_decay must be in (0, 1)");
        }
        if (lr <= 0.0) throw std::invalid_argument("config: lr must be positive");
        if (total_epochs < 0 || pretrain_epochs < 0 || pretrain_epochs > total_epochs) {
            throw std::invalid_argument("config: need 0 <= pretrain_epochs <= total_epochs");
        }
        if (batch_size < 1) throw std::invalid_argument("config: batch_size must be >= 1");
        if (keep_ratio <= 0.0 || keep_ratio > 1.0) {
            throw std::invalid_argument("config: keep_ratio must be in (0, 1]");
        }
        if (lr_decay_factor <= 0.0) throw std::invalid_argument("config: lr_decay_factor must be positive");
    }
};

/// Maximum probabilities collected over an epoch; beta is the nearest-rank
/// percentile of the previous epoch's collection and starts at zero.
struct ConfidenceState {
    double beta = 0.0;
    std::vector<double> collected_max_probs;
};

struct PseudoLabelBatch {
    Tensor labels;  // one-hot [N, C] (or soft probabilities) / heatmaps [N, J, h, w]
    Tensor mask;    // [N] or [N, J], entries 0 or 1
    std::vector<double> confidences;
};

// ---------------------------------------------------------------------------
// EMA teacher
// ---------------------------------------------------------------------------

inline void ema_update(std::vector<Tensor>& teacher, const std::vector<Tensor>& student,
                       double decay) {
    if (decay <= 0.0 || decay >= 1.0) throw std::invalid_argument("ema_update: decay must be in (0, 1)");
    if (teacher.size() != student.size()) {
        throw std::invalid_argument("ema_update: tensor lists differ in length (" +
                                    std::to_string(teacher.size()) + " vs " +
                                    std::to_string(student.size()) + ")");
    }
    for (std::size_t i = 0; i < teacher.size(); ++i) {
        if (teacher[i].shape() != student[i].shape()) {
            throw std::invalid_argument("ema_update: shape mismatch at tensor " + std::to_string(i) +
                                        ": " + detail::shape_str(teacher[i].shape()) + " vs " +
                                        detail::shape_str(student[i].shape()));
        }
        double* t = teacher[i].ptr();
        const double* s = student[i].ptr();
        const std::size_t n = teacher[i].numel();
        for (std::size_t j = 0; j < n; ++j) t[j] = decay * t[j] + (1.0 - decay) * s[j];
    }
}

/// Student plus its structurally identical EMA copy. The teacher starts as a
/// detached clone and is only ever touched by ema_update.
struct ModelPair {
    Model student;
    Model teacher;
    double ema_decay;

    ModelPair(Model s, double decay)
        : student(std::move(s)), teacher(student.clone(false)), ema_decay(decay) {
        if (decay <= 0.0 || decay >= 1.0) throw std::invalid_argument("ModelPair: decay must be in (0, 1)");
    }
};

inline void ema_update(ModelPair& pair) {
    ema_update(pair.teacher.parameters(), pair.student.parameters(), pair.ema_decay);
    ema_update(pair.teacher.buffers(), pair.student.buffers(), pair.ema_decay);
}

// ---------------------------------------------------------------------------
// Pseudo-labels and confidence threshold
// ---------------------------------------------------------------------------

/// Hard (or soft) pseudo-labels from teacher logits. Per-sample confidence is
/// the maximum sigmoid probability; confidences are appended to the state's
/// collection when one is given. The mask is all-ones until
/// mask_pseudo_labels_cls applies the threshold.
inline PseudoLabelBatch make_pseudo_labels_cls(const Tensor& teacher_logits,
                                               ConfidenceState* state = nullptr,
                                               bool soft_labels = false) {
    if (teacher_logits.rank() != 2) {
        throw std::invalid_argument("make_pseudo_labels_cls: logits must be [N, C], got " +
                                    detail::shape_str(teacher_logits.shape()));
    }
    const std::size_t N = teacher_logits.dim(0), C = teacher_logits.dim(1);
    PseudoLabelBatch out;
    out.labels = Tensor({N, C});
    out.mask = Tensor({N}, 1.0);
    for (std::size_t n = 0; n < N; ++n) {
        std::size_t best = 0;
        double best_prob = detail::stable_sigmoid(teacher_logits(n, 0));
        if (soft_labels) out.labels(n, 0) = best_prob;
        for (std::size_t c = 1; c < C; ++c) {
            const double p = detail::stable_sigmoid(teacher_logits(n, c));
            if (soft_labels) out.labels(n, c) = p;
            if (p > best_prob) {
                best_prob = p;
                best = c;
            }
        }
        if (!soft_labels) out.labels(n, best) = 1.0;
        out.confidences.push_back(best_prob);
        if (state) state->collected_max_probs.push_back(best_prob);
    }
    return out;
}

/// Nearest-rank percentile update at an epoch boundary. An empty collection
/// leaves beta unchanged; the collection is cleared after the update.
inline double update_confidence_threshold(ConfidenceState& state, double p) {
    if (p <= 0.0 || p > 100.0) {
        throw std::invalid_argument("update_confidence_threshold: p must be in (0, 100]");
    }
    if (state.collected_max_probs.empty()) return state.beta;
    std::vector<double> sorted = state.collected_max_probs;
    std::sort(sorted.begin(), sorted.end());
    const std::size_t n = sorted.size();
    std::size_t rank = static_cast<std::size_t>(
        std::ceil(p / 100.0 * static_cast<double>(n)));
    rank = std::min(std::max<std::size_t>(rank, 1), n);
    state.beta = sorted[rank - 1];
    state.collected_max_probs.clear();
    return state.beta;
}

/// mask[i] = 0 iff confidence[i] < beta (strict), else 1.
inline PseudoLabelBatch& mask_pseudo_labels_cls(PseudoLabelBatch& batch, double beta) {
    if (batch.confidences.size() != batch.mask.numel()) {
        throw std::invalid_argument("mask_pseudo_labels_cls: confidences not populated");
    }
    for (std::size_t i = 0; i < batch.confidences.size(); ++i) {
        batch.mask.raw()[i] = batch.confidences[i] < beta ? 0.0 : 1.0;
    }
    return batch;
}

/// Pose pseudo-labels: teacher heatmaps re-rendered as Gaussians at their
/// argmax peaks, with per-joint confidence = peak value. Batch-wise masking
/// drops the lowest (1 - keep_ratio) fraction of joint confidences; joints
/// tied with the cutoff value are dropped with it.
inline PseudoLabelBatch make_pseudo_labels_pose(const Tensor& teacher_heatmaps, double keep_ratio,
                                                double sigma = 2.0) {
    if (keep_ratio <= 0.0 || keep_ratio > 1.0) {
        throw std::invalid_argument("make_pseudo_labels_pose: keep_ratio must be in (0, 1]");
    }
    const std::size_t N = teacher_heatmaps.dim(0), J = teacher_heatmaps.dim(1);
    const std::size_t h = teacher_heatmaps.dim(2), w = teacher_heatmaps.dim(3);
    PseudoLabelBatch out;
    Tensor coords = decode_keypoints(teacher_heatmaps);
    out.labels = render_gaussian_heatmaps(coords, h, w, sigma);
    Tensor peaks = heatmap_peaks(teacher_heatmaps);
    out.mask = Tensor({N, J}, 1.0);
    out.confidences.assign(peaks.ptr(), peaks.ptr() + peaks.numel());
    if (keep_ratio < 1.0) {
        const std::size_t total = N * J;
        const std::size_t keep = static_cast<std::size_t>(
            std::ceil(keep_ratio * static_cast<double>(total)));
        const std::size_t drop = total - keep;
        if (drop > 0) {
            std::vector<double> sorted = out.confidences;
            std::sort(sorted.begin(), sorted.end());
            const double cutoff = sorted[drop - 1];
            for (std::size_t i = 0; i < total; ++i) {
                if (out.confidences[i] <= cutoff) out.mask.raw()[i] = 0.0;
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

inline Tensor one_hot(const std::vector<int>& labels, int classes) {
    Tensor t({labels.size(), static_cast<std::size_t>(classes)});
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0 || labels[i] >= classes) {
            throw std::invalid_argument("one_hot: label " + std::to_string(labels[i]) +
                                        " outside [0, " + std::to_string(classes) + ")");
        }
        t(i, static_cast<std::size_t>(labels[i])) = 1.0;
    }
    return t;
}

namespace detail {
inline std::size_t mask_count(const Tensor& mask) {
    std::size_t n = 0;
    for (double v : mask.raw()) {
        if (v != 0.0) ++n;
    }
    return n;
}
}  // namespace detail

/// BCE over unmasked rows only (mean over unmasked samples and classes);
/// exactly zero, with no graph, when everything is masked.
inline Tensor masked_bce_with_logits(const Tensor& logits, const Tensor& targets,
                                     const Tensor& mask) {
    const std::size_t kept = detail::mask_count(mask);
    if (kept == 0) return Tensor::scalar(0.0);
    Tensor elem = bce_with_logits_elem(logits, targets);
    Tensor masked = mul_prefix(elem, mask);
    const double denom = static_cast<double>(kept) * static_cast<double>(logits.dim(1));
    return mul_scalar(sum_all(masked), 1.0 / denom);
}

/// MSE over unmasked joints only (mean over unmasked joints' pixels).
inline Tensor masked_mse(const Tensor& pred, const Tensor& target, const Tensor& mask) {
    const std::size_t kept = detail::mask_count(mask);
    if (kept == 0) return Tensor::scalar(0.0);
    Tensor d = sub(pred, target);
    Tensor masked = mul_prefix(mul(d, d), mask);
    const double denom =
        static_cast<double>(kept) * static_cast<double>(pred.numel() / (pred.dim(0) * pred.dim(1)));
    return mul_scalar(sum_all(masked), 1.0 / denom);
}

struct LossParts {
    Tensor total;
    double sup = 0.0;
    double unsup = 0.0;
};

/// L_total = BCE(y_s, student_src) + lambda * masked BCE(pseudo, student_tgt).
/// With lambda == 0 or everything masked, the unsupervised term is skipped
/// entirely so L_total is the supervised loss bit-for-bit.
inline LossParts classification_loss(const Tensor& student_src_logits, const Tensor& y_s_one_hot,
                                     const Tensor& student_tgt_logits, const PseudoLabelBatch& pseudo,
                                     double lambda) {
    LossParts parts;
    Tensor sup = bce_with_logits_loss(student_src_logits, y_s_one_hot);
    parts.sup = sup.value();
    if (lambda > 0.0 && student_tgt_logits.defined() && detail::mask_count(pseudo.mask) > 0) {
        Tensor unsup = masked_bce_with_logits(student_tgt_logits, pseudo.labels, pseudo.mask);
        parts.unsup = unsup.value();
        parts.total = add(sup, mul_scalar(unsup, lambda));
    } else {
        parts.total = sup;
    }
    return parts;
}

/// Pose counterpart with MSE on heatmaps. The supervised side takes the
/// per-joint validity mask of the (possibly augmented) labels.
inline LossParts pose_loss(const Tensor& student_src_heatmaps, const Tensor& y_s_heatmaps,
                           const Tensor& sup_valid, const Tensor& student_tgt_heatmaps,
                           const PseudoLabelBatch& pseudo, double lambda) {
    LossParts parts;
    Tensor sup = masked_mse(student_src_heatmaps, y_s_heatmaps, sup_valid);
    parts.sup = sup.value();
    if (lambda > 0.0 && student_tgt_heatmaps.defined() && detail::mask_count(pseudo.mask) > 0) {
        Tensor unsup = masked_mse(student_tgt_heatmaps, pseudo.labels, pseudo.mask);
        parts.unsup = unsup.value();
        parts.total = add(sup, mul_scalar(unsup, lambda));
    } else {
        parts.total = sup;
    }
    return parts;
}

/// Ground-truth heatmaps for image-space keypoints: coordinates are mapped
/// to heatmap space with half-pixel centers, then rendered as Gaussians.
inline Tensor make_heatmap_targets(const Tensor& keypoints_img, const Tensor* valid, std::size_t hm_h,
                                   std::size_t hm_w, double ratio, double sigma) {
    const std::size_t N = keypoints_img.dim(0), J = keypoints_img.dim(1);
    Tensor hm_coords({N, J, 2});
    for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t j = 0; j < J; ++j) {
            hm_coords(n, j, 0) = image_to_heatmap(keypoints_img(n, j, 0), ratio);
            hm_coords(n, j, 1) = image_to_heatmap(keypoints_img(n, j, 1), ratio);
        }
    }
    return render_gaussian_heatmaps(hm_coords, hm_h, hm_w, sigma, valid);
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

/// Target-metric evaluation of a frozen model: accuracy for classification,
/// PCK at the given threshold for pose (heatmap argmax mapped back to image
/// coordinates).
inline double evaluate_model(Model& model, const Dataset& ds, Task task, std::size_t image_size,
                             double pck_threshold = 0.05, std::size_t batch_size = 32) {
    NoGradScope ng;
    if (task == Task::classification) {
        std::vector<int> pred;
        for (std::size_t start = 0; start < ds.size(); start += batch_size) {
            std::vector<std::size_t> idx;
            for (std::size_t i = start; i < std::min(ds.size(), start + batch_size); ++i) idx.push_back(i);
            DomainBatch b = make_batch(ds, idx, false);
            Tensor logits = model.forward(b.images, false);
            for (std::size_t n = 0; n < idx.size(); ++n) {
                std::size_t best = 0;
                for (std::size_t c = 1; c < logits.dim(1); ++c) {
                    if (logits(n, c) > logits(n, best)) best = c;
                }
                pred.push_back(static_cast<int>(best));
            }
        }
        return accuracy(pred, ds.labels);
    }
    std::vector<double> pred_coords;
    const std::size_t J = ds.keypoints.dim(1);
    for (std::size_t start = 0; start < ds.size(); start += batch_size) {
        std::vector<std::size_t> idx;
        for (std::size_t i = start; i < std::min(ds.size(), start + batch_size); ++i) idx.push_back(i);
        DomainBatch b = make_batch(ds, idx, false);
        Tensor heat = model.forward(b.images, false);
        Tensor coords = decode_keypoints(heat);
        const double ratio = static_cast<double>(image_size) / static_cast<double>(heat.dim(2));
        for (std::size_t n = 0; n < idx.size(); ++n) {
            for (std::size_t j = 0; j < J; ++j) {
                pred_coords.push_back(heatmap_to_image(coords(n, j, 0), ratio));
                pred_coords.push_back(heatmap_to_image(coords(n, j, 1), ratio));
            }
        }
    }
    Tensor pred = Tensor::from_data({ds.size(), J, 2}, std::move(pred_coords));
    return pck(pred, ds.keypoints, image_size, pck_threshold);
}

struct StepMetrics {
    double loss_sup = 0.0;
    double loss_unsup = 0.0;
    double loss_total = 0.0;
    double alpha = 0.0;
    double beta = 0.0;
};

struct EpochRecord {
    int epoch = 0;
    std::string phase;
    double loss_sup = 0.0;
    double loss_unsup = 0.0;
    double loss_total = 0.0;
    double beta = 0.0;
    double target_metric = 0.0;
    double alpha_mean = 0.0;
};

struct TrainData {
    Dataset source_train;
    Dataset target_train;
    Dataset target_eval;
};

struct TrainOutput {
    Model student;
    std::optional<Model> teacher;
    std::vector<EpochRecord> history;
    double final_metric = 0.0;
};

inline std::string history_to_csv(const std::vector<EpochRecord>& history) {
    std::ostringstream os;
    os << std::setprecision(17);
    os << "epoch,phase,loss_sup,loss_unsup,loss_total,beta,target_metric,alpha_mean\n";
    for (const EpochRecord& r : history) {
        os << r.epoch << "," << r.phase << "," << r.loss_sup << "," << r.loss_unsup << ","
           << r.loss_total << "," << r.beta << "," << r.target_metric << "," << r.alpha_mean << "\n";
    }
    return os.str();
}

class Trainer {
public:
    Trainer(TrainConfig cfg, Task task, Method method)
        : cfg_(std::move(cfg)), task_(task), method_(method) {
        cfg_.validate();
        AlphaPolicy pol = cfg_.alpha_policy;
        pol.rng_seed = mix_seed(cfg_.seed, 0xa1fa);
        alpha_ = std::make_unique<AlphaSource>(pol);
    }

    /// Builds the model and optimizer for the given datasets.
    void setup(const TrainData& data) {
        const std::size_t size = data.source_train.images.dim(2);
        const int in_ch = static_cast<int>(data.source_train.images.dim(1));
        LayerGraph graph;
        if (task_ == Task::classification) {
            int classes = 0;
            for (int l : data.source_train.labels) classes = std::max(classes, l + 1);
            num_classes_ = classes;
            graph = build_lenet5_classifier(in_ch, classes, size);
        } else {
            joints_ = static_cast<int>(data.source_train.keypoints.dim(1));
            graph = build_pose_model(in_ch, joints_, cfg_.model_width);
        }
        student_ = Model(graph, size, size, mix_seed(cfg_.seed, 0x6d6f64));
        opt_ = std::make_unique<Adam>(student_.parameters(), cfg_.lr);
        image_size_ = size;
    }

    Model& student() { return student_; }
    Model* teacher() { return pair_ ? &pair_->teacher : nullptr; }
    ConfidenceState& confidence() { return conf_; }
    Adam& optimizer() { return *opt_; }
    int num_classes() const { return num_classes_; }

    void start_adaptation() {
        if (method_ != Method::source_only && !pair_) {
            pair_.emplace(student_, cfg_.ema_decay);
        }
    }

    StepMetrics supervised_step(const DomainBatch& src) {
        Tape tape;
        TapeScope scope(tape);
        opt_->zero_grad();
        LossParts parts;
        if (task_ == Task::classification) {
            Tensor logits = student_.forward(src.images, true);
            parts.total = bce_with_logits_loss(logits, one_hot(*src.class_labels, num_classes_));
            parts.sup = parts.total.value();
        } else {
            Tensor heat = student_.forward(src.images, true);
            Tensor targets = make_heatmap_targets(src.keypoints, &src.joint_valid, heat.dim(2),
                                                  heat.dim(3),
                                                  static_cast<double>(image_size_) /
                                                      static_cast<double>(heat.dim(2)),
                                                  cfg_.heatmap_sigma);
            parts.total = masked_mse(heat, targets, src.joint_valid);
            parts.sup = parts.total.value();
        }
        tape.backward(parts.total);
        opt_->step();
        StepMetrics m;
        m.loss_sup = parts.sup;
        m.loss_total = parts.total.value();
        m.beta = conf_.beta;
        return m;
    }

    /// One adaptation step: stylize taps, student predictions on stylized
    /// source and raw target, teacher pseudo-labels from target-to-source
    /// stylized features, masked losses, optimizer step, EMA update.
    StepMetrics adapt_step(const DomainBatch& src, const DomainBatch& tgt) {
        if (!pair_) throw std::logic_error("adapt_step: call start_adaptation() first");
        if (src.images.dim(0) != tgt.images.dim(0)) {
            throw std::invalid_argument("adapt_step: source and target batches must have equal size");
        }
        Tape tape;
        TapeScope scope(tape);
        opt_->zero_grad();
        const double alpha = method_ == Method::imsty ? alpha_->sample() : 0.0;

        Tensor f_s = student_.forward_to_tap(src.images, true);
        Tensor f_t = student_.forward_to_tap(tgt.images, true);
        // One alpha per step, shared by both stylization directions. alpha==0
        // short-circuits to the raw features (bit-exact by the identity
        // property) so the no-style arm is literally the baseline graph.
        Tensor f_st = alpha == 0.0 ? f_s
                                   : implicit_stylize(f_s, f_t, alpha, cfg_.stat_scope,
                                                      cfg_.stylize_eps, cfg_.stylize_stop_stats_grad);
        Tensor out_s = student_.forward_from_tap(f_st, true);
        Tensor out_t = student_.forward_from_tap(f_t, true);

        PseudoLabelBatch pseudo;
        {
            NoGradScope ng;
            Tensor f_t_tea = pair_->teacher.forward_to_tap(tgt.images, true, false);
            Tensor src_stats_feats =
                cfg_.teacher_source_stats == TrainConfig::TeacherSourceStats::student
                    ? f_s
                    : pair_->teacher.forward_to_tap(src.images, true, false);
            Tensor f_ts = alpha == 0.0 ? f_t_tea
                                       : implicit_stylize(f_t_tea, src_stats_feats, alpha,
                                                          cfg_.stat_scope, cfg_.stylize_eps);
            Tensor teacher_out = pair_->teacher.forward_from_tap(f_ts, true, false);
            if (task_ == Task::classification) {
                pseudo = make_pseudo_labels_cls(teacher_out, &conf_, cfg_.soft_pseudo_labels);
                mask_pseudo_labels_cls(pseudo, conf_.beta);
            } else {
                pseudo = make_pseudo_labels_pose(teacher_out, cfg_.keep_ratio, cfg_.heatmap_sigma);
            }
        }

        LossParts parts;
        if (task_ == Task::classification) {
            parts = classification_loss(out_s, one_hot(*src.class_labels, num_classes_), out_t,
                                        pseudo, cfg_.lambda_unsup);
            if (cfg_.beta_collect == TrainConfig::BetaCollect::both) {
                collect_source_confidences(out_s);
            }
        } else {
            Tensor targets = make_heatmap_targets(src.keypoints, &src.joint_valid, out_s.dim(2),
                                                  out_s.dim(3),
                                                  static_cast<double>(image_size_) /
                                                      static_cast<double>(out_s.dim(2)),
                                                  cfg_.heatmap_sigma);
            parts = pose_loss(out_s, targets, src.joint_valid, out_t, pseudo, cfg_.lambda_unsup);
        }
        tape.backward(parts.total);
        opt_->step();
        ema_update(*pair_);

        StepMetrics m;
        m.loss_sup = parts.sup;
        m.loss_unsup = parts.unsup;
        m.loss_total = parts.total.value();
        m.alpha = alpha;
        m.beta = conf_.beta;
        return m;
    }

    double evaluate(Model& model, const Dataset& ds) {
        return evaluate_model(model, ds, task_, image_size_, cfg_.pck_threshold,
                              static_cast<std::size_t>(cfg_.batch_size));
    }

    TrainOutput run(const TrainData& data) {
        setup(data);
        std::vector<EpochRecord> history;
        double lr = cfg_.lr;
        for (int epoch = 1; epoch <= cfg_.total_epochs; ++epoch) {
            for (int de : cfg_.lr_decay_epochs) {
                if (epoch == de) {
                    lr *= cfg_.lr_decay_factor;
                    opt_->set_lr(lr);
                }
            }
            const bool adapting = epoch > cfg_.pretrain_epochs && method_ != Method::source_only;
            if (epoch == cfg_.pretrain_epochs + 1) start_adaptation();

            const double beta_in_effect = conf_.beta;
            std::vector<std::size_t> src_order = epoch_order(data.source_train.size(), 0, epoch);
            std::size_t steps = src_order.size() / static_cast<std::size_t>(cfg_.batch_size);
            std::vector<std::size_t> tgt_order;
            if (adapting) {
                tgt_order = epoch_order(data.target_train.size(), 1, epoch);
                steps = std::min(steps, tgt_order.size() / static_cast<std::size_t>(cfg_.batch_size));
            }
            double sum_sup = 0.0, sum_unsup = 0.0, sum_total = 0.0, sum_alpha = 0.0;
            for (std::size_t s = 0; s < steps; ++s) {
                DomainBatch src = augment(
                    make_batch(data.source_train,
                               slice(src_order, s * cfg_.batch_size, cfg_.batch_size), true),
                    cfg_.augment, mix_seed(cfg_.seed, 0x617567, 0, epoch, s));
                StepMetrics m;
                if (!adapting) {
                    m = supervised_step(src);
                } else {
                    DomainBatch tgt = augment(
                        make_batch(data.target_train,
                                   slice(tgt_order, s * cfg_.batch_size, cfg_.batch_size), false),
                        cfg_.augment, mix_seed(cfg_.seed, 0x617567, 1, epoch, s));
                    m = adapt_step(src, tgt);
                }
                sum_sup += m.loss_sup;
                sum_unsup += m.loss_unsup;
                sum_total += m.loss_total;
                sum_alpha += m.alpha;
            }
            if (adapting && task_ == Task::classification) {
                update_confidence_threshold(conf_, cfg_.percentile_p);
            }
            EpochRecord rec;
            rec.epoch = epoch;
            rec.phase = epoch <= cfg_.pretrain_epochs ? "pretrain" : "adapt";
            const double denom = steps > 0 ? static_cast<double>(steps) : 1.0;
            rec.loss_sup = sum_sup / denom;
            rec.loss_unsup = sum_unsup / denom;
            rec.loss_total = sum_total / denom;
            rec.beta = beta_in_effect;
            rec.alpha_mean = sum_alpha / denom;
            rec.target_metric = evaluate(student_, data.target_eval);
            history.push_back(rec);
        }
        TrainOutput out;
        out.student = student_;
        if (pair_) out.teacher = pair_->teacher;
        out.history = std::move(history);
        out.final_metric = out.history.empty() ? 0.0 : out.history.back().target_metric;
        return out;
    }

private:
    void collect_source_confidences(const Tensor& logits) {
        for (std::size_t n = 0; n < logits.dim(0); ++n) {
            double best = detail::stable_sigmoid(logits(n, 0));
            for (std::size_t c = 1; c < logits.dim(1); ++c) {
                best = std::max(best, detail::stable_sigmoid(logits(n, c)));
            }
            conf_.collected_max_probs.push_back(best);
        }
    }

    std::vector<std::size_t> epoch_order(std::size_t count, int domain_tag, int epoch) {
        std::vector<std::size_t> order(count);
        for (std::size_t i = 0; i < count; ++i) order[i] = i;
        Rng rng(mix_seed(cfg_.seed, 0x73687566, domain_tag, epoch));
        rng.shuffle(order);
        return order;
    }

    static std::vector<std::size_t> slice(const std::vector<std::size_t>& v, std::size_t start,
                                          int count) {
        return std::vector<std::size_t>(v.begin() + static_cast<std::ptrdiff_t>(start),
                                        v.begin() + static_cast<std::ptrdiff_t>(start + count));
    }

    TrainConfig cfg_;
    Task task_;
    Method method_;
    Model student_;
    std::optional<ModelPair> pair_;
    std::unique_ptr<Adam> opt_;
    std::unique_ptr<AlphaSource> alpha_;
    ConfidenceState conf_;
    int num_classes_ = 0;
    int joints_ = 0;
    std::size_t image_size_ = 0;
};

inline TrainOutput run_training(const TrainConfig& cfg, const TrainData& data, Task task,
                                Method method) {
    Trainer trainer(cfg, task, method);
    return trainer.run(data);
}

}  // namespace imsty
