from .infobounds import (BoundError, MassAccount, BoundReport, MassLossCheck, binary_entropy, domain_limit,
                         clamp_argument, mi_loss_bound, bound_slope, kl_variant, kl_truncation, posterior_bias,
                         posthoc_bound, prehoc_bound, expected_prehoc_bound, oracle_mass, top_n, mass_loss_check,
                         logit_perturb_bound, key_perturb_bound, centroid_drift_bound)
from .channel import (ChannelModel, ChannelResult, random_channel, mutual_information, exact_mi_channel,
                      oracle_sets, MAX_CONTEXTS, MAX_LENGTH, MAX_ALPHABET)
from .certificates import (CertificateInput, CisCertificate, PsawCertificate, EtfCertificate, ScheduleTuning,
                           JointCertificate, cis_certificate, psaw_certificate, psaw_mass_bound, etf_certificate,
                           tune_schedules, joint_certificate, drift_mass)
