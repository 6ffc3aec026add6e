from enum import Enum


class LifeType(Enum):
    # disassembly ingestion
    DATA_PROCESSING = "DATA_PROCESSING"
    DATA_PROCESSED = "DATA_PROCESSED"
    DATA_PROCESS_FAILED = "DATA_PROCESS_FAILED"

    # instruction normalization and corpus building
    DATA_CLEANING = "DATA_CLEANING"
    DATA_CLEANED = "DATA_CLEANED"
    DATA_CLEAN_FAILED = "DATA_CLEAN_FAILED"

    # subword learning
    VOCAB_LEARNING = "VOCAB_LEARNING"
    VOCAB_LEARNED = "VOCAB_LEARNED"
    VOCAB_LEARN_FAILED = "VOCAB_LEARN_FAILED"

    # model training (pretraining, joint training, detector training)
    MODEL_TRAINING = "MODEL_TRAINING"
    MODEL_TRAINED = "MODEL_TRAINED"
    MODEL_TRAIN_FAILED = "MODEL_TRAIN_FAILED"

    # translation, scoring and export
    MODEL_EVALUATING = "MODEL_EVALUATING"
    MODEL_EVALUATED = "MODEL_EVALUATED"
    MODEL_EVALUATE_FAILED = "MODEL_EVALUATE_FAILED"
