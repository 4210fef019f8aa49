#pragma once

#include "dspo/alignment_losses.hpp"
#include "dspo/annotation_server.hpp"
#include "dspo/annotation_service.hpp"
#include "dspo/captioner.hpp"
#include "dspo/checkpoint.hpp"
#include "dspo/common.hpp"
#include "dspo/data_synthesis.hpp"
#include "dspo/denoiser.hpp"
#include "dspo/eval_report.hpp"
#include "dspo/image.hpp"
#include "dspo/iqa.hpp"
#include "dspo/nn.hpp"
#include "dspo/noise_schedule.hpp"
#include "dspo/pipeline.hpp"
#include "dspo/preference_builder.hpp"
#include "dspo/prompt_vocab.hpp"
#include "dspo/sampler.hpp"
#include "dspo/semantic_instances.hpp"
#include "dspo/tensor.hpp"
#include "dspo/trainer.hpp"
