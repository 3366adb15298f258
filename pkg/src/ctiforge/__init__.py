"""ctiforge: batch pipeline turning CTI reports into detection artifacts.

Stages: paragraph ingestion, model-driven IOC extraction with majority-vote
purification, knowledge-base filtering, capture-group classification and
regex synthesis with automated validation, relationship extraction and
verification, and relationship-graph / SIEM-rule-draft export.
"""

__version__ = "0.1.0"
