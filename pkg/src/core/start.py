import logging.config
import dotenv
import os

dotenv.load_dotenv()
level = os.getenv('FEDPEFT_LOG_LEVEL', 'INFO').upper()
log_file = os.getenv('FEDPEFT_LOG_FILE')

handlers = {
    'console': {
        'class': 'logging.StreamHandler'
        , 'formatter': 'default'
        , 'level': level
    }
}
if log_file:
    handlers['file'] = {
        'class': 'logging.FileHandler'
        , 'formatter': 'default'
        , 'level': 'DEBUG'
        , 'filename': log_file
        , 'mode': 'a'
    }

logging.config.dictConfig({
    'version': 1
    , 'disable_existing_loggers': False
    , 'formatters': {
        'default': {
            'format': '[%(asctime)s] %(levelname)s: %(message)s'
            , 'datefmt': '%Y-%m-%d %H:%M:%S'
        }
    }
    , 'handlers': handlers
    , 'root': {
        'handlers': list(handlers)
        , 'level': 'DEBUG' if log_file else level
    }
})

logger = logging.getLogger('root')
